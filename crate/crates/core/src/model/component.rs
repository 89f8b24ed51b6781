use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// One of the five parameter subnetworks of the translation model.
///
/// Attention has no parameters of its own; the projection that combines the
/// attention context with the decoder state is tagged [`Component::Decoder`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    SourceEmbedding,
    Encoder,
    Decoder,
    Softmax,
    TargetEmbedding,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::SourceEmbedding,
        Component::Encoder,
        Component::Decoder,
        Component::Softmax,
        Component::TargetEmbedding,
    ];

    /// Stable on-disk tag.
    pub fn tag(self) -> u8 {
        match self {
            Component::SourceEmbedding => 0,
            Component::Encoder => 1,
            Component::Decoder => 2,
            Component::Softmax => 3,
            Component::TargetEmbedding => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Component> {
        Component::ALL.get(usize::from(tag)).copied()
    }

    /// Kebab-case name used on the command line and in reports.
    pub fn name(self) -> &'static str {
        match self {
            Component::SourceEmbedding => "source-embedding",
            Component::Encoder => "encoder",
            Component::Decoder => "decoder",
            Component::Softmax => "softmax",
            Component::TargetEmbedding => "target-embedding",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        match norm.as_str() {
            "sourceembedding" | "srcembed" | "sourceembed" | "srcemb" => {
                Ok(Component::SourceEmbedding)
            }
            "encoder" | "enc" => Ok(Component::Encoder),
            "decoder" | "dec" => Ok(Component::Decoder),
            "softmax" | "output" => Ok(Component::Softmax),
            "targetembedding" | "tgtembed" | "targetembed" | "tgtemb" => {
                Ok(Component::TargetEmbedding)
            }
            _ => Err(Error::Usage(format!("unknown component {s:?}"))),
        }
    }
}
