//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::layers::Builder;
use crate::params::ParamStore;
use crate::tape::{NodeId, Tensor};

/// Gradients below this magnitude are compared absolutely. Central
/// differences at step 1e-5 carry roundoff near 1e-10 for O(1) losses, so the
/// floor keeps that noise well under a 1e-4 relative tolerance.
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Parameter or input element with the largest error.
    pub worst: String,
    pub checked: usize,
}

/// Checks `f` against central differences with step `step`, over every
/// trainable parameter element and every element of `inputs`. The scalar
/// checked is `Σ f(x) ⊙ r` for a fixed random `r`. `train` selects batch
/// statistics in batch norm.
pub fn gradient_check<F>(store: &ParamStore, inputs: &[Tensor], train: bool, step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Builder, &[NodeId]) -> Result<NodeId>,
{
    let mut projection: Option<Tensor> = None;
    let eval = |store: &ParamStore, inputs: &[Tensor], projection: &mut Option<Tensor>| -> Result<f64> {
        let mut b = Builder::new(store, train, false);
        let ids: Vec<NodeId> = inputs.iter().map(|t| b.tape.input(t.clone())).collect();
        let out = f(&mut b, &ids)?;
        let v = b.tape.value(out);
        let r = projection.get_or_insert_with(|| random_like(&v.shape));
        Ok(v.data.iter().zip(&r.data).map(|(a, b)| a * b).sum())
    };
    eval(store, inputs, &mut projection)?;
    let r = projection.clone().unwrap();

    let mut b = Builder::new(store, train, true);
    let ids: Vec<NodeId> = inputs.iter().map(|t| b.tape.variable(t.clone())).collect();
    let out = f(&mut b, &ids)?;
    let rid = b.tape.input(r);
    let prod = b.tape.mul(out, rid)?;
    let loss = b.tape.sum_all(prod);
    let grads = b.tape.backward(loss);
    let mut param_grads: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for (i, g) in grads.params() {
        param_grads[i] = Some(g.to_vec());
    }
    let input_grads: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| grads.get(id).map_or_else(|| vec![0.0; t.len()], |g| g.to_vec()))
        .collect();

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |name: String, analytic: f64, numeric: f64| {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err;
            report.worst = format!("{name}: analytic {analytic:e}, numeric {numeric:e}");
        }
    };

    let mut work = store.clone();
    for i in 0..store.len() {
        if !store.block(i).trainable {
            continue;
        }
        for k in 0..store.block(i).value.len() {
            let orig = store.block(i).value.data[k];
            work.block_mut(i).value.data[k] = orig + step;
            let up = eval(&work, inputs, &mut projection)?;
            work.block_mut(i).value.data[k] = orig - step;
            let down = eval(&work, inputs, &mut projection)?;
            work.block_mut(i).value.data[k] = orig;
            let analytic = param_grads[i].as_ref().map_or(0.0, |g| g[k]);
            record(format!("{}[{k}]", store.block(i).name), analytic, (up - down) / (2.0 * step));
        }
    }
    let mut work_inputs = inputs.to_vec();
    for (j, t) in inputs.iter().enumerate() {
        for k in 0..t.len() {
            let orig = t.data[k];
            work_inputs[j].data[k] = orig + step;
            let up = eval(store, &work_inputs, &mut projection)?;
            work_inputs[j].data[k] = orig - step;
            let down = eval(store, &work_inputs, &mut projection)?;
            work_inputs[j].data[k] = orig;
            record(format!("input{j}[{k}]"), input_grads[j][k], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Seeded standard-normal tensor.
pub fn random_like(shape: &[usize]) -> Tensor {
    random_tensor(shape, 0x5eed, 1.0)
}

pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{conv, WeightInit};

    #[test]
    fn quadratic_minimum_has_zero_gradient() {
        // d/dx mean((x - t)^2) vanishes at x = t.
        let t = random_tensor(&[1, 1, 8], 3, 1.0);
        let store = ParamStore::new();
        let r = gradient_check(&store, &[t.clone()], false, 1e-5, |b, ids| {
            let c = b.tape.input(t.clone());
            b.tape.mse(ids[0], c)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Backward through a detached copy misses the dependency entirely.
        let store = ParamStore::new();
        let x = random_tensor(&[1, 1, 4], 1, 1.0);
        let r = gradient_check(&store, &[x], false, 1e-5, |b, ids| {
            let v = b.tape.value(ids[0]).clone();
            Ok(b.tape.input(v))
        })
        .unwrap();
        assert!(r.max_rel_error > 0.5);
    }

    #[test]
    fn conv_passes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        {
            let mut b = Builder::init(&mut store, &mut rng);
            let x = b.tape.input(Tensor::zeros(&[2, 3, 8]));
            conv(&mut b, "c", x, 4, &[3], None, true, WeightInit::He).unwrap();
        }
        let x = random_tensor(&[2, 3, 8], 9, 1.0);
        let r = gradient_check(&store, &[x], false, 1e-5, |b, ids| conv(b, "c", ids[0], 4, &[3], None, true, WeightInit::He)).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
