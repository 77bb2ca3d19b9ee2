//! Result files.
//!
//! | file | columns |
//! |---|---|
//! | `rho_final.csv` | `x`, then one column per density field at the final time |
//! | `phi_final.csv` | `x`, then one column per potential field (problem 2 only) |
//! | `loss_history.csv` | `stage,epoch,macro,micro,bc,ic,diffusion,data_rho,data_phi,poisson,total,lr,sigma,rel_error,rel_error_phi` |
//! | `sigma_trajectory.csv` | `run,sigma0,epoch,sigma` (inverse only) |
//! | `trajectory.csv` | `t,x,rho[,phi]` (reference only) |
//! | `micro.csv` | `t,x,v,g` on the cell faces (micro-macro reference only) |
//! | `summary.json` | scalar results and provenance |
//!
//! Reals are written with 17 significant digits, so the files are
//! byte-identical across identical runs and round-trip exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use biapnn_core::net::{DenseNet, OutputTransform};
use biapnn_core::spectral::maxwellian;
use serde::{Deserialize, Serialize};

use crate::run::ResultsBundle;

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub config_hash: String,
    pub problem: String,
    pub method: String,
    pub mode: String,
    pub eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_error_rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_error_phi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_hat: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sigma_hats: Vec<f64>,
    pub epochs: usize,
    pub wall_time_s: f64,
    pub seed: u64,
    pub t_final: f64,
    pub negative_density_events: usize,
    pub version: String,
    pub config: String,
}

impl Summary {
    pub fn from_bundle(b: &ResultsBundle) -> Self {
        Summary {
            config_hash: b.config_hash.clone(),
            problem: b.config.problem.name().into(),
            method: b.config.method.name().into(),
            mode: b.mode.name().into(),
            eps: b.config.eps,
            rel_error_rho: b.rel_error_rho,
            rel_error_phi: b.rel_error_phi,
            sigma_hat: b.sigma_hat(),
            sigma_hats: b.sigma_runs.iter().map(|r| r.sigma_hat).collect(),
            epochs: b.epochs,
            wall_time_s: b.wall_time_s,
            seed: b.config.seed,
            t_final: b.t_final,
            negative_density_events: b.negative_density_events,
            version: b.version.clone(),
            config: b.config.canonical(),
        }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

fn columns_csv(xs: &[f64], cols: &[(String, Vec<f64>)]) -> String {
    let mut s = String::from("x");
    for (name, _) in cols {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for (i, x) in xs.iter().enumerate() {
        s.push_str(&num(*x));
        for (_, c) in cols {
            s.push(',');
            s.push_str(&num(c[i]));
        }
        s.push('\n');
    }
    s
}

pub const HISTORY_HEADER: &str =
    "stage,epoch,macro,micro,bc,ic,diffusion,data_rho,data_phi,poisson,total,lr,sigma,rel_error,rel_error_phi";

fn history_csv(b: &ResultsBundle) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for row in &b.history {
        let r = &row.record;
        let _ = write!(s, "{},{}", row.stage, r.epoch);
        for x in r.loss.terms().iter().chain(std::iter::once(&r.loss.total)) {
            let _ = write!(s, ",{}", num(*x));
        }
        let _ = writeln!(
            s,
            ",{},{},{},{}",
            num(r.lr),
            opt(r.sigma),
            opt(r.rel_error),
            opt(r.rel_error_phi)
        );
    }
    s
}

fn sigma_csv(b: &ResultsBundle) -> String {
    let mut s = String::from("run,sigma0,epoch,sigma\n");
    for (k, run) in b.sigma_runs.iter().enumerate() {
        for (epoch, sigma) in &run.trajectory {
            let _ = writeln!(s, "{k},{},{epoch},{}", num(run.sigma0), num(*sigma));
        }
    }
    s
}

fn trajectory_csv(b: &ResultsBundle) -> Option<(String, Option<String>)> {
    let sol = b.trajectory.as_ref()?;
    let with_phi = sol.phi.len() == sol.times.len() && b.config.with_phi();
    let mut s = String::from(if with_phi { "t,x,rho,phi\n" } else { "t,x,rho\n" });
    for (n, t) in sol.times.iter().enumerate() {
        for (i, x) in sol.grid.nodes.iter().enumerate() {
            let _ = write!(s, "{},{},{}", num(*t), num(*x), num(sol.rho[n][i]));
            if with_phi {
                let _ = write!(s, ",{}", num(sol.phi[n][i]));
            }
            s.push('\n');
        }
    }
    if sol.g_over_m.len() != sol.times.len() {
        return Some((s, None));
    }
    let nv = sol.velocity_nodes.len();
    let faces = sol.grid.faces();
    let mut m = String::from("t,x,v,g\n");
    for (n, t) in sol.times.iter().enumerate() {
        for (f, x) in faces.iter().enumerate() {
            for (j, v) in sol.velocity_nodes.iter().enumerate() {
                let g = sol.g_over_m[n][f * nv + j] * maxwellian(*v);
                let _ = writeln!(m, "{},{},{},{}", num(*t), num(*x), num(*v), num(g));
            }
        }
    }
    Some((s, Some(m)))
}

/// Writes the result files into `dir` (created if needed) and returns their
/// names in the order written.
pub fn emit_results(b: &ResultsBundle, dir: &Path) -> std::io::Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::new();
    let put = |manifest: &mut Vec<String>, name: &str, body: &str| -> std::io::Result<()> {
        fs::write(dir.join(name), body)?;
        manifest.push(name.to_string());
        Ok(())
    };
    put(&mut manifest, "rho_final.csv", &columns_csv(&b.xs, &b.rho_columns))?;
    if !b.phi_columns.is_empty() {
        put(&mut manifest, "phi_final.csv", &columns_csv(&b.xs, &b.phi_columns))?;
    }
    if !b.history.is_empty() {
        put(&mut manifest, "loss_history.csv", &history_csv(b))?;
    }
    if !b.sigma_runs.is_empty() {
        put(&mut manifest, "sigma_trajectory.csv", &sigma_csv(b))?;
    }
    if let Some((traj, micro)) = trajectory_csv(b) {
        put(&mut manifest, "trajectory.csv", &traj)?;
        if let Some(m) = micro {
            put(&mut manifest, "micro.csv", &m)?;
        }
    }
    for (name, net) in &b.networks {
        let base = PathBuf::from("checkpoints").join(name);
        let rel = base.to_string_lossy().into_owned();
        fs::create_dir_all(dir.join("checkpoints"))?;
        save_checkpoint(net, &dir.join(&base))?;
        manifest.push(format!("{rel}.params"));
        manifest.push(format!("{rel}.json"));
    }
    let summary = serde_json::to_string_pretty(&Summary::from_bundle(b)).map_err(std::io::Error::other)?;
    put(&mut manifest, "summary.json", &(summary + "\n"))?;
    Ok(manifest)
}

/// Sidecar describing a `.params` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub widths: Vec<usize>,
    pub transform: String,
    pub seed: u64,
    pub param_count: usize,
    pub layout: String,
}

const LAYOUT: &str = "layer-major; per layer the weights row-major (out x in), then the biases";

/// Writes `<base>.params` (one value per line) and the `<base>.json` sidecar.
pub fn save_checkpoint(net: &DenseNet, base: &Path) -> std::io::Result<()> {
    let mut body = String::with_capacity(net.params().len() * 25);
    for p in net.params() {
        body.push_str(&num(*p));
        body.push('\n');
    }
    fs::write(base.with_extension("params"), body)?;
    let meta = CheckpointMeta {
        widths: net.widths().to_vec(),
        transform: match net.transform() {
            OutputTransform::Identity => "identity".into(),
            OutputTransform::NegExp => "neg_exp".into(),
        },
        seed: net.seed(),
        param_count: net.params().len(),
        layout: LAYOUT.into(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(std::io::Error::other)?;
    fs::write(base.with_extension("json"), json + "\n")
}

pub fn load_checkpoint(base: &Path) -> std::io::Result<DenseNet> {
    let invalid = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidData, m);
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(base.with_extension("json"))?)
        .map_err(|e| invalid(e.to_string()))?;
    let transform = match meta.transform.as_str() {
        "identity" => OutputTransform::Identity,
        "neg_exp" => OutputTransform::NegExp,
        t => return Err(invalid(format!("unknown transform `{t}`"))),
    };
    let params = fs::read_to_string(base.with_extension("params"))?
        .lines()
        .map(|l| l.trim().parse::<f64>().map_err(|e| invalid(format!("{l}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if params.len() != meta.param_count {
        return Err(invalid(format!(
            "sidecar declares {} parameters, file has {}",
            meta.param_count,
            params.len()
        )));
    }
    DenseNet::from_parts(&meta.widths, transform, meta.seed, params).map_err(|e| invalid(e.to_string()))
}
