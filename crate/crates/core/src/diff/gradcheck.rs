use super::graph::{backward, forward, Graph, Inputs, NodeId};
use super::{ParamStore, Result};

/// Largest relative error between analytic and central-difference gradients
/// over every parameter entry.
///
/// The relative error denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check(
    graph: &Graph,
    params: &ParamStore,
    inputs: &Inputs,
    loss: NodeId,
    h: f64,
) -> Result<f64> {
    let (_, analytic) = backward(graph, params, inputs, loss)?;
    let mut probe = params.clone();
    let mut worst = 0.0_f64;
    let names: Vec<String> = graph.parameter_names();
    for name in &names {
        let len = params.get(name).map_or(0, |m| m.data().len());
        for i in 0..len {
            let orig = params.get(name).expect("bound").data()[i];
            let eval = |probe: &mut ParamStore, v: f64| -> Result<f64> {
                probe.get_mut(name).expect("bound").data_mut()[i] = v;
                Ok(forward(graph, probe, inputs)?.get(loss).item())
            };
            let plus = eval(&mut probe, orig + h)?;
            let minus = eval(&mut probe, orig - h)?;
            probe.get_mut(name).expect("bound").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let exact = analytic.get(name).map_or(0.0, |g| g.data()[i]);
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
