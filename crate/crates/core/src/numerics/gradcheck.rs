//! Central finite-difference checks of tape gradients.

use super::{OpKind, RngStream, Scalar, Tape, Tensor, Var};
use crate::error::Result;

/// Below this gradient norm the relative error turns into an absolute one,
/// so parameters whose true gradient vanishes (e.g. attention key biases)
/// are not judged on round-off noise.
pub const GRAD_NORM_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||, GRAD_NORM_FLOOR)`
    /// over the checked coordinates.
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.rel_err < tol)
    }

    pub fn extend(&mut self, prefix: &str, other: GradCheckReport) {
        for mut e in other.entries {
            e.name = format!("{prefix}{}", e.name);
            self.entries.push(e);
        }
    }
}

/// Compare tape gradients of `f` against central differences with step `h`.
///
/// `f` builds a scalar loss from one leaf per named input. At most
/// `max_coords` coordinates per input are perturbed (evenly strided), or all
/// of them when `None`. `fault` negates one backward rule on the analytic
/// pass only.
pub fn check_gradients<T, F>(
    inputs: &[(String, Tensor<T>)],
    h: f64,
    max_coords: Option<usize>,
    fault: Option<OpKind>,
    f: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_sign_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (_, t))| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |values: &[Tensor<T>]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let loss = f(&mut t, &vars)?;
        Ok(t.value(loss).item().as_f64())
    };

    let mut values: Vec<Tensor<T>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport::default();
    for (i, (name, t)) in inputs.iter().enumerate() {
        let n = t.numel();
        let stride = match max_coords {
            Some(m) if m > 0 && m < n => n.div_ceil(m),
            _ => 1,
        };
        let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
        let mut checked = 0;
        for j in (0..n).step_by(stride) {
            let orig = values[i].data()[j];
            let up = orig + T::cast(h);
            let down = orig - T::cast(h);
            values[i].data_mut()[j] = up;
            let plus = eval(&values)?;
            values[i].data_mut()[j] = down;
            let minus = eval(&values)?;
            values[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (up - down).as_f64();
            let a = analytic[i].data()[j].as_f64();
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
            checked += 1;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(GRAD_NORM_FLOOR);
        let rel_err = diff2.sqrt() / denom;
        report.entries.push(GradCheckEntry { name: name.clone(), checked, max_abs_err: max_abs, rel_err });
    }
    Ok(report)
}

type OpCase<T> = (Vec<(String, Tensor<T>)>, Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>);

/// Small random inputs and a builder applying one op kind.
fn op_case<T: Scalar>(kind: OpKind, rng: &mut RngStream) -> OpCase<T> {
    let mut t = |shape: &[usize]| -> Tensor<T> { rng.randn(shape) };
    let named = |v: Vec<Tensor<T>>| -> Vec<(String, Tensor<T>)> {
        v.into_iter().enumerate().map(|(i, t)| (format!("in{i}"), t)).collect()
    };
    match kind {
        OpKind::Add => (named(vec![t(&[3, 4]), t(&[3, 4])]), Box::new(|g, v| g.add(v[0], v[1]))),
        OpKind::Sub => (named(vec![t(&[3, 4]), t(&[3, 4])]), Box::new(|g, v| g.sub(v[0], v[1]))),
        OpKind::Mul => (named(vec![t(&[3, 4]), t(&[3, 4])]), Box::new(|g, v| g.mul(v[0], v[1]))),
        OpKind::AddRow => (named(vec![t(&[3, 4]), t(&[4])]), Box::new(|g, v| g.add_row(v[0], v[1]))),
        OpKind::Scale => (named(vec![t(&[3, 4])]), Box::new(|g, v| g.scale(v[0], T::cast(0.7)))),
        OpKind::AddScalar => (named(vec![t(&[3, 4])]), Box::new(|g, v| g.add_scalar(v[0], T::cast(0.3)))),
        OpKind::MatMul => (named(vec![t(&[3, 4]), t(&[4, 5])]), Box::new(|g, v| g.matmul(v[0], v[1]))),
        OpKind::Transpose => (named(vec![t(&[3, 4])]), Box::new(|g, v| g.transpose(v[0]))),
        OpKind::Reshape => (named(vec![t(&[3, 4])]), Box::new(|g, v| g.reshape(v[0], &[2, 6]))),
        OpKind::Concat => (named(vec![t(&[2, 3]), t(&[2, 2])]), Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        OpKind::Slice => (named(vec![t(&[3, 5])]), Box::new(|g, v| g.slice(v[0], 1, 1, 3))),
        OpKind::GatherRows => (named(vec![t(&[4, 3])]), Box::new(|g, v| g.gather_rows(v[0], &[2, 0, 2, 3]))),
        OpKind::Softmax => (named(vec![t(&[3, 5])]), Box::new(|g, v| g.softmax(v[0]))),
        OpKind::LayerNorm => (
            named(vec![t(&[3, 6]), t(&[6]), t(&[6])]),
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
        ),
        OpKind::Gelu => (named(vec![t(&[3, 4])]), Box::new(|g, v| g.gelu(v[0]))),
        OpKind::Sum => (named(vec![t(&[3, 4])]), Box::new(|g, v| g.sum(v[0]))),
        OpKind::Mean => (named(vec![t(&[3, 4])]), Box::new(|g, v| g.mean(v[0]))),
        OpKind::SumAxis => (named(vec![t(&[2, 3, 4])]), Box::new(|g, v| g.sum_axis(v[0], 1))),
        OpKind::MeanAxis => (named(vec![t(&[2, 3, 4])]), Box::new(|g, v| g.mean_axis(v[0], 0))),
        OpKind::Attention => (
            named(vec![t(&[6, 4]), t(&[10, 4]), t(&[10, 4])]),
            Box::new(|g, v| g.attention(v[0], v[1], v[2], 2, 2)),
        ),
        OpKind::CrossEntropy => (named(vec![t(&[4, 3])]), Box::new(|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]))),
        OpKind::NormalizeRows => (named(vec![t(&[3, 4])]), Box::new(|g, v| g.normalize_rows(v[0]))),
    }
}

/// Finite-difference check of every differentiable op. Each op output is
/// contracted with fixed random weights so every output coordinate matters.
pub fn check_all_ops<T: Scalar>(seed: u64, h: f64, fault: Option<OpKind>) -> Result<Vec<(OpKind, GradCheckReport)>> {
    let mut rng = RngStream::new(seed);
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        let (inputs, build) = op_case::<T>(kind, &mut rng);
        let mut probe = Tape::new();
        let probe_vars: Vec<Var> = inputs.iter().map(|(_, t)| probe.constant(t.clone())).collect();
        let probe_out = build(&mut probe, &probe_vars)?;
        let out_shape = probe.shape(probe_out).to_vec();
        let weights: Tensor<T> = rng.randn(&out_shape);
        let report = check_gradients(&inputs, h, None, fault, |g, v| {
            let y = build(g, v)?;
            let w = g.constant(weights.clone());
            let yw = g.mul(y, w)?;
            g.sum(yw)
        })?;
        out.push((kind, report));
    }
    Ok(out)
}
