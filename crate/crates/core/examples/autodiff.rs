//! Builds a small expression on the tape, backpropagates, and checks the
//! gradient against central finite differences.

use freezelab::model::ParameterStore;
use freezelab::nn::gradcheck::check_store;
use freezelab::nn::{Graph, SeededRng, Tensor};
use freezelab::Component;

fn loss(store: &ParameterStore, g: &mut Graph) -> freezelab::Result<freezelab::nn::Var> {
    let w = g.param(store, store.id("w")?);
    let b = g.param(store, store.id("b")?);
    let x = g.constant(Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.1, -1.0]])?);
    let h = g.affine(x, w, b)?;
    let h = g.tanh(h);
    g.cross_entropy(h, &[1, 0], 0.1, true)
}

fn main() -> freezelab::Result<()> {
    let mut rng = SeededRng::new(0);
    let mut store = ParameterStore::new();
    store.add("w", Component::Decoder, Tensor::uniform(&[3, 4], -0.5, 0.5, &mut rng))?;
    store.add("b", Component::Decoder, Tensor::zeros(&[4]))?;

    let mut g = Graph::new();
    let l = loss(&store, &mut g)?;
    println!("loss {:.6}", g.scalar(l));
    g.backward(l, &mut store)?;
    println!("dL/dw {:?}", store.by_name("w").unwrap().grad.data());

    let report = check_store(
        &store,
        |s| {
            let mut g = Graph::new();
            let l = loss(s, &mut g)?;
            Ok(g.scalar(l))
        },
        1e-5,
    )?;
    for (name, err) in report {
        println!("{name}: max relative error {err:.2e}");
    }
    Ok(())
}
