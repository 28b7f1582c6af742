//! Central finite-difference checks of analytic gradients at 64-bit precision.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttnSource, Graph, ParamId, ParameterStore, Result, Tensor, Var};

/// Finite-difference step used throughout.
pub const STEP: f64 = 1e-3;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Fourth-order central difference of `f` at `x`.
fn five_point(f: &mut impl FnMut(f64) -> Result<f64>, x: f64) -> Result<f64> {
    let (h, h2) = (STEP, 2.0 * STEP);
    let (p1, m1, p2, m2) = (f(x + h)?, f(x - h)?, f(x + h2)?, f(x - h2)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Checks `build` (which maps free variables to a scalar loss) on every
/// coordinate of every input.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor<f64>], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.variable(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let mut worst = 0.0f64;
    let mut probes = 0;
    let mut work = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(*var) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; inputs[ti].len()],
        };
        for (j, &a) in analytic.iter().enumerate() {
            let orig = work[ti].data()[j];
            let mut at = |x: f64| -> Result<f64> {
                work[ti].data_mut()[j] = x;
                eval(&work)
            };
            let numeric = five_point(&mut at, orig)?;
            work[ti].data_mut()[j] = orig;
            worst = worst.max(rel_err(a, numeric));
            probes += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.into(),
        probes,
        max_rel_err: worst,
    })
}

/// Checks `loss_fn` against finite differences on `probes` randomly chosen
/// coordinates spread over all parameters of `store`.
pub fn check_parameters<F>(
    name: &str,
    store: &ParameterStore<f64>,
    probes: usize,
    seed: u64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    let mut store = store.clone();
    store.zero_grads();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, &store)?;
    g.backward(loss)?;
    store.accumulate(&g);
    let total = store.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, total, probes.min(total)).into_vec();
    let offsets: Vec<(ParamId, usize)> = store.ids().map(|id| (id, store.value(id).len())).collect();
    let locate = |mut flat: usize| -> (ParamId, usize) {
        for &(id, n) in &offsets {
            if flat < n {
                return (id, flat);
            }
            flat -= n;
        }
        unreachable!("flat index within numel")
    };
    let eval = |s: &ParameterStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, s)?;
        Ok(g.value(loss).data()[0])
    };
    let mut worst = 0.0f64;
    for flat in &picks {
        let (id, j) = locate(*flat);
        let analytic = store.grad(id).map_or(0.0, |gr| gr[j]);
        let orig = store.value(id).data()[j];
        let mut at = |x: f64| -> Result<f64> {
            store.value_mut(id).data_mut()[j] = x;
            eval(&store)
        };
        let numeric = five_point(&mut at, orig)?;
        store.value_mut(id).data_mut()[j] = orig;
        worst = worst.max(rel_err(analytic, numeric));
    }
    Ok(GradCheckReport {
        name: name.into(),
        probes: picks.len(),
        max_rel_err: worst,
    })
}

/// Reduces a non-scalar output to a scalar with fixed random weights so every
/// output coordinate carries a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, g.shape(y), 1.0);
    let w = g.input(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Finite-difference check of every differentiable primitive.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape, 1.0);
    let mut out = Vec::new();

    out.push(check_inputs("matmul", &[r(&[3, 4]), r(&[4, 5])], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, 1)
    })?);
    out.push(check_inputs("add", &[r(&[2, 3]), r(&[2, 3])], |g, v| {
        let y = g.add(v[0], v[1])?;
        weighted_sum(g, y, 2)
    })?);
    out.push(check_inputs("sub", &[r(&[2, 3]), r(&[2, 3])], |g, v| {
        let y = g.sub(v[0], v[1])?;
        weighted_sum(g, y, 3)
    })?);
    out.push(check_inputs("mul", &[r(&[2, 3]), r(&[2, 3])], |g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted_sum(g, y, 4)
    })?);
    out.push(check_inputs("add_bias", &[r(&[3, 4]), r(&[4])], |g, v| {
        let y = g.add_bias(v[0], v[1])?;
        weighted_sum(g, y, 5)
    })?);
    out.push(check_inputs("scale", &[r(&[5])], |g, v| {
        let y = g.scale(v[0], -1.7)?;
        weighted_sum(g, y, 6)
    })?);
    out.push(check_inputs("gelu", &[r(&[2, 5])], |g, v| {
        let y = g.gelu(v[0])?;
        weighted_sum(g, y, 7)
    })?);
    out.push(check_inputs("sigmoid", &[r(&[2, 5])], |g, v| {
        let y = g.sigmoid(v[0])?;
        weighted_sum(g, y, 8)
    })?);
    out.push(check_inputs("softmax", &[r(&[3, 6])], |g, v| {
        let y = g.softmax(v[0])?;
        weighted_sum(g, y, 9)
    })?);
    out.push(check_inputs("layer_norm", &[r(&[3, 6]), r(&[6]), r(&[6])], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(g, y, 10)
    })?);
    out.push(check_inputs("gather_rows", &[r(&[4, 3]), r(&[2, 3])], |g, v| {
        let map = [Some((0, 2)), None, Some((1, 0)), Some((0, 2)), Some((1, 1))];
        let y = g.gather_rows(&[v[0], v[1]], &map)?;
        weighted_sum(g, y, 11)
    })?);
    out.push(check_inputs("self_attention", &[r(&[2 * 5, 3 * 8])], |g, v| {
        let y = g.attention(
            AttnSource::new(v[0], 0),
            AttnSource::new(v[0], 8),
            AttnSource::new(v[0], 16),
            8,
            2,
            5,
            5,
            &[0, 1],
        )?;
        weighted_sum(g, y, 12)
    })?);
    out.push(check_inputs("cross_attention", &[r(&[3 * 4, 8]), r(&[2 * 6, 16])], |g, v| {
        let y = g.attention(
            AttnSource::new(v[0], 0),
            AttnSource::new(v[1], 0),
            AttnSource::new(v[1], 8),
            8,
            4,
            4,
            6,
            &[1, 0, 1],
        )?;
        weighted_sum(g, y, 13)
    })?);
    out.push(check_inputs("cross_entropy", &[r(&[4, 7])], |g, v| {
        g.cross_entropy(v[0], &[Some(3), None, Some(0), Some(6)])
    })?);
    let targets: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
    out.push(check_inputs("bce_with_logits", &[r(&[3, 4])], |g, v| {
        g.bce_with_logits(v[0], &targets)
    })?);
    out.push(check_inputs("mse", &[r(&[2, 3]), r(&[2, 3])], |g, v| g.mse(v[0], v[1]))?);
    out.push(check_inputs("sum", &[r(&[4])], |g, v| {
        let sq = g.mul(v[0], v[0])?;
        g.sum(sq)
    })?);
    out.push(check_inputs("mean", &[r(&[4])], |g, v| {
        let sq = g.mul(v[0], v[0])?;
        g.mean(sq)
    })?);
    out.push(check_inputs("max_pool_rows", &[r(&[6, 3])], |g, v| {
        let y = g.max_pool_rows(v[0], 3)?;
        weighted_sum(g, y, 14)
    })?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for report in primitive_suite(11).unwrap() {
            assert!(report.probes > 0);
            assert!(report.max_rel_err < 1e-4, "{}: {}", report.name, report.max_rel_err);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of x·stop_grad(x) is x, not 2x; the check must notice if we
        // compare against a loss whose analytic gradient is missing a term.
        let report = check_inputs("broken", &[Tensor::new(&[2], vec![0.7, -1.3]).unwrap()], |g, v| {
            let s = g.stop_grad(v[0]);
            let y = g.mul(v[0], s)?;
            g.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_err > 0.1);
    }
}
