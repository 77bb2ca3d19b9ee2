//! Dense tanh networks with exact input derivatives.
//!
//! A forward pass propagates, for a batch of inputs, the value together with
//! first derivatives along selected input coordinates and optionally one
//! second derivative along one of them. The backward pass differentiates all
//! of those outputs with respect to the parameters, which is what a
//! physics-informed loss needs.
//!
//! Parameter layout (the "parameter vector"): layers in order, for each
//! layer the row-major `out x in` weight matrix followed by the `out` biases.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutputTransform {
    Identity,
    /// `u ↦ exp(-u)`, strictly positive.
    NegExp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    widths: Vec<usize>,
    params: Vec<f64>,
    transform: OutputTransform,
    seed: u64,
}

/// Which input derivatives a jet forward pass carries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct JetSpec {
    /// Input coordinates with a first derivative.
    pub dirs: Vec<usize>,
    /// Position in `dirs` of the coordinate that also gets a second derivative.
    pub second: Option<usize>,
}

impl JetSpec {
    pub fn value_only() -> Self {
        JetSpec::default()
    }

    pub fn first(dirs: &[usize]) -> Self {
        JetSpec {
            dirs: dirs.to_vec(),
            second: None,
        }
    }

    pub fn with_second(dirs: &[usize], second: usize) -> Self {
        JetSpec {
            dirs: dirs.to_vec(),
            second: Some(second),
        }
    }
}

/// Batched outputs, each row-major `batch x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct JetOutput {
    pub batch: usize,
    pub width: usize,
    pub value: Vec<f64>,
    pub d: Vec<Vec<f64>>,
    pub dd: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct HiddenCache {
    y: Vec<f64>,
    ta: Vec<Vec<f64>>,
    ty: Vec<Vec<f64>>,
    tta: Option<Vec<f64>>,
    tty: Option<Vec<f64>>,
}

/// Activations kept by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct JetCache {
    spec: JetSpec,
    batch: usize,
    inputs: Vec<f64>,
    hidden: Vec<HiddenCache>,
    /// Pre-transform output and its tangents.
    raw: JetOutput,
    out: JetOutput,
}

/// Adjoints of a [`JetOutput`], same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct JetAdjoint {
    pub value: Vec<f64>,
    pub d: Vec<Vec<f64>>,
    pub dd: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + k.saturating_sub(1) * csa + usize::from(k > 0));
    debug_assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: shapes and strides describe in-bounds views, checked above for
    // `a`/`c` and by construction of the callers for `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

impl DenseNet {
    /// Number of parameters for the given layer widths.
    pub fn param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid("network needs an input and an output layer of non-zero width"));
        }
        Ok(())
    }

    /// Xavier-uniform weights, zero biases; deterministic in `seed`.
    pub fn xavier(widths: &[usize], transform: OutputTransform, seed: u64) -> Result<Self> {
        Self::check_widths(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(Self::param_count(widths));
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            for _ in 0..fan_in * fan_out {
                params.push(rng.gen_range(-bound..=bound));
            }
            params.extend(core::iter::repeat_n(0.0, fan_out));
        }
        Ok(DenseNet {
            widths: widths.to_vec(),
            params,
            transform,
            seed,
        })
    }

    pub fn zeros(widths: &[usize], transform: OutputTransform) -> Result<Self> {
        Self::check_widths(widths)?;
        Ok(DenseNet {
            widths: widths.to_vec(),
            params: vec![0.0; Self::param_count(widths)],
            transform,
            seed: 0,
        })
    }

    pub fn from_parts(widths: &[usize], transform: OutputTransform, seed: u64, params: Vec<f64>) -> Result<Self> {
        Self::check_widths(widths)?;
        if params.len() != Self::param_count(widths) {
            return Err(Error::invalid(alloc::format!(
                "parameter vector has {} entries, widths need {}",
                params.len(),
                Self::param_count(widths)
            )));
        }
        Ok(DenseNet {
            widths: widths.to_vec(),
            params,
            transform,
            seed,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn transform(&self) -> OutputTransform {
        self.transform
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Offsets of layer `l`'s weights and biases in the parameter vector.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.widths.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        (off, off + self.widths[l] * self.widths[l + 1])
    }

    /// Plain forward pass; `inputs` is row-major `batch x input_width`.
    pub fn forward(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_jet(inputs, &JetSpec::value_only())?.value)
    }

    /// Values and requested input derivatives.
    pub fn forward_jet(&self, inputs: &[f64], spec: &JetSpec) -> Result<JetOutput> {
        Ok(self.forward_cached(inputs, spec, false)?.out)
    }

    /// Forward pass retaining what [`DenseNet::backward`] needs.
    pub fn forward_cached(&self, inputs: &[f64], spec: &JetSpec, keep: bool) -> Result<JetCache> {
        let din = self.input_width();
        if !inputs.len().is_multiple_of(din) {
            return Err(Error::invalid(alloc::format!(
                "input length {} is not a multiple of the input width {din}",
                inputs.len()
            )));
        }
        if spec.dirs.iter().any(|&d| d >= din) || spec.second.is_some_and(|s| s >= spec.dirs.len()) {
            return Err(Error::invalid("jet direction out of range"));
        }
        let batch = inputs.len() / din;
        let nd = spec.dirs.len();
        let nl = self.num_layers();

        let mut z: Vec<f64> = inputs.to_vec();
        let mut tz: Vec<Vec<f64>> = Vec::new();
        let mut ttz: Option<Vec<f64>> = None;
        let mut hidden = Vec::new();
        let mut raw = None;

        for l in 0..nl {
            let (fi, fo) = (self.widths[l], self.widths[l + 1]);
            let (wo, bo) = self.layer_offsets(l);
            let w = &self.params[wo..bo];
            let b = &self.params[bo..bo + fo];

            let mut a = vec![0.0; batch * fo];
            for row in a.chunks_exact_mut(fo) {
                row.copy_from_slice(b);
            }
            gemm((batch, fi, fo), &z, (fi, 1), w, (1, fi), 1.0, &mut a, fo);

            let mut ta: Vec<Vec<f64>> = Vec::with_capacity(nd);
            for (k, &dir) in spec.dirs.iter().enumerate() {
                let mut t = vec![0.0; batch * fo];
                if l == 0 {
                    let col: Vec<f64> = (0..fo).map(|o| w[o * fi + dir]).collect();
                    for row in t.chunks_exact_mut(fo) {
                        row.copy_from_slice(&col);
                    }
                } else {
                    gemm((batch, fi, fo), &tz[k], (fi, 1), w, (1, fi), 0.0, &mut t, fo);
                }
                ta.push(t);
            }
            let tta = spec.second.map(|_| {
                let mut t = vec![0.0; batch * fo];
                if let Some(prev) = &ttz {
                    gemm((batch, fi, fo), prev, (fi, 1), w, (1, fi), 0.0, &mut t, fo);
                }
                t
            });

            if l + 1 < nl {
                let y: Vec<f64> = a.iter().map(|&x| libm::tanh(x)).collect();
                let ty: Vec<Vec<f64>> = ta
                    .iter()
                    .map(|t| t.iter().zip(&y).map(|(d, y)| (1.0 - y * y) * d).collect())
                    .collect();
                let tty = match (spec.second, &tta) {
                    (Some(s), Some(tt)) => Some(
                        (0..batch * fo)
                            .map(|i| {
                                let yi = y[i];
                                let si = 1.0 - yi * yi;
                                si * tt[i] - 2.0 * yi * si * ta[s][i] * ta[s][i]
                            })
                            .collect::<Vec<f64>>(),
                    ),
                    _ => None,
                };
                let prev_inputs = core::mem::replace(&mut z, y.clone());
                if l == 0 && keep {
                    // inputs are kept separately in the cache
                    drop(prev_inputs);
                }
                tz = ty.clone();
                ttz = tty.clone();
                if keep {
                    hidden.push(HiddenCache { y, ta, ty, tta, tty });
                }
            } else {
                raw = Some(JetOutput {
                    batch,
                    width: fo,
                    value: a,
                    d: ta,
                    dd: tta,
                });
            }
        }
        let raw = raw.expect("network has at least one layer");
        let out = self.apply_transform(&raw, spec);
        Ok(JetCache {
            spec: spec.clone(),
            batch,
            inputs: if keep { inputs.to_vec() } else { Vec::new() },
            hidden,
            raw,
            out,
        })
    }

    fn apply_transform(&self, raw: &JetOutput, spec: &JetSpec) -> JetOutput {
        match self.transform {
            OutputTransform::Identity => raw.clone(),
            OutputTransform::NegExp => {
                let r: Vec<f64> = raw.value.iter().map(|&u| libm::exp(-u)).collect();
                let d = raw
                    .d
                    .iter()
                    .map(|du| du.iter().zip(&r).map(|(du, r)| -r * du).collect())
                    .collect();
                let dd = match (spec.second, &raw.dd) {
                    (Some(s), Some(ddu)) => Some(
                        (0..r.len())
                            .map(|i| r[i] * (raw.d[s][i] * raw.d[s][i] - ddu[i]))
                            .collect(),
                    ),
                    _ => None,
                };
                JetOutput {
                    batch: raw.batch,
                    width: raw.width,
                    value: r,
                    d,
                    dd,
                }
            }
        }
    }

    /// Accumulates into `grad` the parameter gradient of
    /// `Σ adj.value·value + Σ_k adj.d[k]·d[k] + adj.dd·dd`.
    pub fn backward(&self, cache: &JetCache, adj: &JetAdjoint, grad: &mut [f64]) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::invalid("gradient buffer length differs from parameter count"));
        }
        let spec = &cache.spec;
        let nd = spec.dirs.len();
        let batch = cache.batch;
        let nl = self.num_layers();
        if cache.hidden.len() + 1 != nl || (cache.inputs.is_empty() && batch > 0) {
            return Err(Error::invalid("jet cache was not recorded for backward"));
        }

        // Undo the output transform.
        let (mut abar, mut tabar, mut ttabar) = match self.transform {
            OutputTransform::Identity => (adj.value.clone(), adj.d.clone(), adj.dd.clone()),
            OutputTransform::NegExp => {
                let r = &cache.out.value;
                let raw = &cache.raw;
                let n = r.len();
                let mut ubar = vec![0.0; n];
                let mut dubar: Vec<Vec<f64>> = vec![vec![0.0; n]; nd];
                let mut ddubar = spec.second.map(|_| vec![0.0; n]);
                for i in 0..n {
                    let mut rbar = adj.value[i];
                    for k in 0..nd {
                        rbar -= adj.d[k][i] * raw.d[k][i];
                        dubar[k][i] = -r[i] * adj.d[k][i];
                    }
                    if let (Some(s), Some(ddr_bar), Some(ddu), Some(ddub)) =
                        (spec.second, &adj.dd, &raw.dd, ddubar.as_mut())
                    {
                        let dus = raw.d[s][i];
                        rbar += ddr_bar[i] * (dus * dus - ddu[i]);
                        dubar[s][i] += ddr_bar[i] * r[i] * 2.0 * dus;
                        ddub[i] = -r[i] * ddr_bar[i];
                    }
                    ubar[i] = -r[i] * rbar;
                }
                (ubar, dubar, ddubar)
            }
        };

        for l in (0..nl).rev() {
            let (fi, fo) = (self.widths[l], self.widths[l + 1]);
            let (wo, bo) = self.layer_offsets(l);

            // a = z W^T + b, ta_k = tz_k W^T, tta = ttz W^T
            {
                let (wgrad, bgrad) = grad[wo..bo + fo].split_at_mut(bo - wo);
                for row in abar.chunks_exact(fo) {
                    for (g, a) in bgrad.iter_mut().zip(row) {
                        *g += a;
                    }
                }
                let z_prev: &[f64] = if l == 0 { &cache.inputs } else { &cache.hidden[l - 1].y };
                gemm((fo, batch, fi), &abar, (1, fo), z_prev, (fi, 1), 1.0, wgrad, fi);
                for k in 0..nd {
                    if l == 0 {
                        let dir = spec.dirs[k];
                        for row in tabar[k].chunks_exact(fo) {
                            for o in 0..fo {
                                wgrad[o * fi + dir] += row[o];
                            }
                        }
                    } else {
                        let tz = &cache.hidden[l - 1].ty[k];
                        gemm((fo, batch, fi), &tabar[k], (1, fo), tz, (fi, 1), 1.0, wgrad, fi);
                    }
                }
                if let (Some(tt), true) = (&ttabar, l > 0) {
                    if let Some(ttz) = &cache.hidden[l - 1].tty {
                        gemm((fo, batch, fi), tt, (1, fo), ttz, (fi, 1), 1.0, wgrad, fi);
                    }
                }
            }
            if l == 0 {
                break;
            }

            let w = &self.params[wo..bo];
            let back = |x: &[f64]| -> Vec<f64> {
                let mut out = vec![0.0; batch * fi];
                gemm((batch, fo, fi), x, (fo, 1), w, (fi, 1), 0.0, &mut out, fi);
                out
            };
            let ybar = back(&abar);
            let tybar: Vec<Vec<f64>> = tabar.iter().map(|t| back(t)).collect();
            let ttybar = ttabar.as_ref().map(|t| back(t));

            // Through y = tanh(a), ty_k = s ta_k, tty = s tta + s' ta_s².
            let h = &cache.hidden[l - 1];
            let n = batch * fi;
            let mut new_abar = vec![0.0; n];
            let mut new_tabar: Vec<Vec<f64>> = vec![vec![0.0; n]; nd];
            let mut new_ttabar = spec.second.map(|_| vec![0.0; n]);
            for i in 0..n {
                let y = h.y[i];
                let s = 1.0 - y * y;
                let mut sbar = 0.0;
                let mut ytot = ybar[i];
                for k in 0..nd {
                    sbar += tybar[k][i] * h.ta[k][i];
                    new_tabar[k][i] = tybar[k][i] * s;
                }
                if let (Some(sd), Some(tty_bar), Some(tta), Some(nt)) =
                    (spec.second, &ttybar, &h.tta, new_ttabar.as_mut())
                {
                    let tb = tty_bar[i];
                    let tas = h.ta[sd][i];
                    let sp = -2.0 * y * s;
                    sbar += tb * tta[i];
                    nt[i] = tb * s;
                    let spbar = tb * tas * tas;
                    new_tabar[sd][i] += tb * sp * 2.0 * tas;
                    ytot += spbar * (-2.0 * s);
                    sbar += spbar * (-2.0 * y);
                }
                ytot += sbar * (-2.0 * y);
                new_abar[i] = ytot * s;
            }
            abar = new_abar;
            tabar = new_tabar;
            ttabar = new_ttabar;
        }
        Ok(())
    }
}

impl JetCache {
    pub fn output(&self) -> &JetOutput {
        &self.out
    }

    pub fn spec(&self) -> &JetSpec {
        &self.spec
    }

    /// Drops everything but the output, for evaluation-only use.
    pub fn into_output(self) -> JetOutput {
        self.out
    }
}
