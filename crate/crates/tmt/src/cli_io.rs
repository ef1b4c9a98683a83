//! Experiment configuration, orchestration and CSV serialization.
//!
//! Configs are JSON documents with defaults filled in; unknown keys are
//! rejected. Each experiment writes CSV data files, gnuplot scripts and a
//! JSON run report whose invariant table mirrors the library's checks.

use crate::fields::{
    airy_field, disk_mask, full_mask, grad_perp_field, gradient_field, random_tensor_field,
    scalar_field, ScalarRecipe,
};
use crate::geometry::{
    make_fan, simplicity_check, trace_geodesic, ConvexSet, DomainSpec, Geodesic, MetricField,
    MetricSpec, Point, Vector,
};
use crate::grid::Grid2;
use crate::reconstruct::{cascade_reconstruct, support_experiment};
use crate::symtensor::{component_count, sorted_multi_indices, SymTensor, SymTensorField};
use crate::transforms::{
    divergence, inner_derivative, l2_inner, moment_transform, ray_xi_derivative,
    v_from_ray_primitive, MomentSinogram,
};
use crate::tube_cascade::{build_chart_retrying, cascade_solve, dv_normal_expansion};
use crate::{Result, TmtError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// The experiments the CLI can run.
pub const EXPERIMENTS: [&str; 7] = [
    "forward",
    "identities",
    "decompose",
    "cascade",
    "tube",
    "support",
    "simplicity",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainConfig {
    pub radius: f64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig { radius: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FanConfig {
    pub n_points: usize,
    pub n_dirs: usize,
    pub step: f64,
}

impl Default for FanConfig {
    fn default() -> Self {
        FanConfig {
            n_points: 64,
            n_dirs: 32,
            step: 5e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    /// One of: constant, bump, gradient, grad_perp, airy, mixed, random.
    pub recipe: String,
    pub center: [f64; 2],
    pub sigma: f64,
    pub window: f64,
    pub amp: f64,
    /// Support radius of the `random` recipe.
    pub radius: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            recipe: "bump".into(),
            center: [0.15, -0.1],
            sigma: 0.3,
            window: 0.7,
            amp: 1.0,
            radius: 0.8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda: 1e-3,
            tol: 1e-8,
            max_iter: 5000,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvexConfig {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Full experiment configuration with documented defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// "euclidean" or a conformal factor expression λ(x1, x2).
    pub metric: String,
    pub domain: DomainConfig,
    /// Grid nodes per axis.
    pub n: usize,
    pub fan: FanConfig,
    /// Tensor order of the test field.
    pub m: usize,
    /// Moment orders to compute; defaults to 0..=m.
    pub moments: Option<Vec<usize>>,
    pub field: FieldConfig,
    pub convex_set: Option<ConvexConfig>,
    pub solver: SolverConfig,
    /// Output directory (overridden by --out and the TMT_OUT variable).
    pub out: Option<String>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            metric: "euclidean".into(),
            domain: DomainConfig::default(),
            n: 64,
            fan: FanConfig::default(),
            m: 1,
            moments: None,
            field: FieldConfig::default(),
            convex_set: None,
            solver: SolverConfig::default(),
            out: None,
            seed: 42,
        }
    }
}

fn config_err(path: &str, msg: impl Into<String>) -> TmtError {
    TmtError::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

impl ExperimentConfig {
    /// Semantic validation with key paths in error messages.
    pub fn validate(&self) -> Result<()> {
        if self.domain.radius <= 0.0 {
            return Err(config_err("domain.radius", "must be positive"));
        }
        if self.n < 8 {
            return Err(config_err("n", "grid needs at least 8 nodes per axis"));
        }
        if self.fan.n_points == 0 {
            return Err(config_err("fan.n_points", "must be positive"));
        }
        if self.fan.n_dirs == 0 {
            return Err(config_err("fan.n_dirs", "must be positive"));
        }
        if self.fan.step <= 0.0 {
            return Err(config_err("fan.step", "must be positive"));
        }
        if self.m > 4 {
            return Err(config_err("m", "tensor orders above 4 are unsupported"));
        }
        if let Some(q_list) = &self.moments {
            if q_list.is_empty() {
                return Err(config_err("moments", "must list at least one order"));
            }
            for &q in q_list {
                if q > self.m {
                    return Err(config_err(
                        "moments",
                        format!("moment order {q} exceeds tensor order m = {}", self.m),
                    ));
                }
            }
        }
        if self.field.sigma <= 0.0 {
            return Err(config_err("field.sigma", "must be positive"));
        }
        if self.field.window <= 0.0 {
            return Err(config_err("field.window", "must be positive"));
        }
        if self.field.amp <= 0.0 {
            return Err(config_err("field.amp", "must be positive"));
        }
        if self.field.radius <= 0.0 {
            return Err(config_err("field.radius", "must be positive"));
        }
        if self.solver.lambda <= 0.0 {
            return Err(config_err("solver.lambda", "must be positive"));
        }
        if self.solver.tol <= 0.0 {
            return Err(config_err("solver.tol", "must be positive"));
        }
        if self.solver.max_iter == 0 {
            return Err(config_err("solver.max_iter", "must be positive"));
        }
        if let Some(k) = &self.convex_set {
            if k.radius <= 0.0 {
                return Err(config_err("convex_set.radius", "must be positive"));
            }
        }
        Ok(())
    }

    /// Moment orders with the default 0..=m filled in.
    pub fn moment_orders(&self) -> Vec<usize> {
        self.moments
            .clone()
            .unwrap_or_else(|| (0..=self.m).collect())
    }

    pub fn metric_spec(&self) -> Result<MetricSpec> {
        if self.metric == "euclidean" {
            Ok(MetricSpec::euclidean())
        } else {
            MetricSpec::conformal_expr(&self.metric)
                .map_err(|e| config_err("metric", format!("bad conformal expression: {e}")))
        }
    }

    pub fn grid(&self) -> Grid2 {
        let r = self.domain.radius;
        Grid2::new(self.n, self.n, -r, r, -r, r)
    }

    /// Evaluate the named field recipe at the configured tensor order.
    pub fn build_field(&self, grid: &Grid2, mask: &[bool]) -> Result<SymTensorField> {
        let fc = &self.field;
        let recipe = ScalarRecipe::bump(fc.center, fc.sigma, fc.window).normalized(fc.amp);
        let masked = mask.to_vec();
        match (fc.recipe.as_str(), self.m) {
            ("constant", m) => {
                // unmasked so boundary quadrature cells see the constant
                let nc = component_count(2, m);
                Ok(SymTensorField::from_fn(
                    grid.clone(),
                    m,
                    vec![true; grid.len()],
                    |_, _| SymTensor::from_comps(2, m, vec![1.0; nc]).unwrap(),
                ))
            }
            ("bump", 0) => Ok(scalar_field(grid.clone(), masked, &recipe)),
            ("bump", 1) | ("grad_perp", 1) => Ok(grad_perp_field(grid.clone(), masked, &recipe)),
            ("bump", 2) | ("airy", 2) => Ok(airy_field(grid.clone(), masked, &recipe)),
            ("gradient", 1) => Ok(gradient_field(grid.clone(), masked, &recipe)),
            ("mixed", 1) => {
                // solenoidal curl part plus a potential gradient part
                let phi = ScalarRecipe::bump(
                    [-fc.center[0], -fc.center[1]],
                    fc.sigma,
                    fc.window,
                )
                .normalized(0.7 * fc.amp);
                let mut f = grad_perp_field(grid.clone(), masked.clone(), &recipe);
                f.axpy(1.0, &gradient_field(grid.clone(), masked, &phi));
                Ok(f)
            }
            ("random", m) => Ok(random_tensor_field(
                grid.clone(),
                masked,
                m,
                self.seed,
                fc.amp,
                fc.radius,
            )),
            (r, m) => Err(config_err(
                "field.recipe",
                format!("recipe `{r}` is not defined for tensor order m = {m}"),
            )),
        }
    }
}

/// Load and validate a JSON config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| TmtError::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// One row of the invariant table.
#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Result of one experiment run: config echo, timings, the invariant table
/// and the list of files produced.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub experiment: String,
    pub config: ExperimentConfig,
    /// Informational quantities without a pass threshold.
    pub stats: Vec<(String, f64)>,
    /// Per-operation wall times in seconds.
    pub timings: Vec<(String, f64)>,
    pub checks: Vec<CheckRow>,
    pub files: Vec<String>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    fn new(experiment: &str, cfg: &ExperimentConfig) -> RunReport {
        RunReport {
            experiment: experiment.into(),
            config: cfg.clone(),
            stats: Vec::new(),
            timings: Vec::new(),
            checks: Vec::new(),
            files: Vec::new(),
        }
    }

    fn check_le(&mut self, name: &str, value: f64, threshold: f64) {
        self.checks.push(CheckRow {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        });
    }

    fn check_gt(&mut self, name: &str, value: f64, threshold: f64) {
        self.checks.push(CheckRow {
            name: name.into(),
            value,
            threshold,
            pass: value > threshold,
        });
    }

    fn stat(&mut self, name: &str, value: f64) {
        self.stats.push((name.into(), value));
    }

    fn timed<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        self.timings.push((name.into(), t0.elapsed().as_secs_f64()));
        out
    }
}

fn component_name(multi: &[u8]) -> String {
    let mut s = String::from("c_");
    for &i in multi {
        let _ = write!(s, "{i}");
    }
    s
}

/// Write a tensor field as CSV: `x1,x2,mask,c_<sorted-multi-index>...`,
/// one row per grid node, row-major over the lattice.
pub fn write_field(path: &Path, f: &SymTensorField) -> Result<()> {
    let mut out = String::from("x1,x2,mask");
    for multi in sorted_multi_indices(2, f.order) {
        out.push(',');
        out.push_str(&component_name(&multi));
    }
    out.push('\n');
    let nc = f.ncomp();
    for node in 0..f.grid.len() {
        let (x1, x2) = f.grid.coords_of(node);
        let _ = write!(out, "{x1},{x2},{}", u8::from(f.mask[node]));
        for c in 0..nc {
            let _ = write!(out, ",{}", f.comp_at(node, c));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.trim().parse::<f64>().map_err(|_| TmtError::Parse {
        line,
        msg: format!("expected a number, got `{tok}`"),
    })
}

/// Read a tensor field written by [`write_field`]; the tensor order is
/// inferred from the component columns of the header.
pub fn read_field(path: &Path) -> Result<SymTensorField> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(TmtError::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[0] != "x1" || cols[1] != "x2" || cols[2] != "mask" {
        return Err(TmtError::Parse {
            line: 1,
            msg: "expected header x1,x2,mask,c_...".into(),
        });
    }
    let nc = cols.len() - 3;
    let order = nc - 1; // dim 2: C(m+1, m) = m+1 components
    let expected: Vec<String> = sorted_multi_indices(2, order)
        .iter()
        .map(|m| component_name(m))
        .collect();
    for (c, name) in cols[3..].iter().enumerate() {
        if *name != expected[c] {
            return Err(TmtError::Parse {
                line: 1,
                msg: format!(
                    "component column {} is `{name}`, expected `{}` for order {order}",
                    c + 4,
                    expected[c]
                ),
            });
        }
    }

    let mut x1s = Vec::new();
    let mut x2s = Vec::new();
    let mut mask = Vec::new();
    let mut data = Vec::new();
    for (idx, row) in lines {
        let line = idx + 1;
        if row.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = row.split(',').collect();
        if toks.len() != cols.len() {
            return Err(TmtError::Parse {
                line,
                msg: format!("expected {} fields, got {}", cols.len(), toks.len()),
            });
        }
        x1s.push(parse_f64(toks[0], line)?);
        x2s.push(parse_f64(toks[1], line)?);
        mask.push(parse_f64(toks[2], line)? != 0.0);
        for tok in &toks[3..] {
            data.push(parse_f64(tok, line)?);
        }
    }
    let n = x1s.len();
    if n < 4 {
        return Err(TmtError::Parse {
            line: 2,
            msg: "field needs at least a 2x2 lattice".into(),
        });
    }
    let n1 = x2s
        .iter()
        .position(|&v| v != x2s[0])
        .unwrap_or(n);
    if n1 < 2 || n % n1 != 0 {
        return Err(TmtError::Parse {
            line: n1 + 1,
            msg: "rows are not a row-major lattice".into(),
        });
    }
    let n2 = n / n1;
    let grid = Grid2::new(n1, n2, x1s[0], x1s[n1 - 1], x2s[0], x2s[n - 1]);
    let mut f = SymTensorField::zeros(grid, order, mask);
    f.data = data;
    Ok(f)
}

/// Write sinograms as CSV: `geodesic_id,boundary_angle,dir_angle,q,value`,
/// one row per (geodesic, q), blocks in the given order.
pub fn write_sinogram(path: &Path, sinos: &[MomentSinogram]) -> Result<()> {
    let mut out = String::from("geodesic_id,boundary_angle,dir_angle,q,value\n");
    for s in sinos {
        for (i, ((ba, da), v)) in s.fan_ids.iter().zip(s.values.iter()).enumerate() {
            let _ = writeln!(out, "{i},{ba},{da},{},{v}", s.q);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read sinograms written by [`write_sinogram`]; the tensor order is not
/// part of the format and must be supplied.
pub fn read_sinogram(path: &Path, order: usize) -> Result<Vec<MomentSinogram>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(TmtError::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    if header != "geodesic_id,boundary_angle,dir_angle,q,value" {
        return Err(TmtError::Parse {
            line: 1,
            msg: "expected header geodesic_id,boundary_angle,dir_angle,q,value".into(),
        });
    }
    let mut sinos: Vec<MomentSinogram> = Vec::new();
    for (idx, row) in lines {
        let line = idx + 1;
        if row.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = row.split(',').collect();
        if toks.len() != 5 {
            return Err(TmtError::Parse {
                line,
                msg: format!("expected 5 fields, got {}", toks.len()),
            });
        }
        let id = toks[0].trim().parse::<usize>().map_err(|_| TmtError::Parse {
            line,
            msg: format!("bad geodesic id `{}`", toks[0]),
        })?;
        let ba = parse_f64(toks[1], line)?;
        let da = parse_f64(toks[2], line)?;
        let q = toks[3].trim().parse::<usize>().map_err(|_| TmtError::Parse {
            line,
            msg: format!("bad moment order `{}`", toks[3]),
        })?;
        if id == 0 || sinos.is_empty() {
            sinos.push(MomentSinogram {
                q,
                order,
                fan_ids: Vec::new(),
                values: Vec::new(),
            });
        }
        let cur = sinos.last_mut().unwrap();
        if cur.fan_ids.len() != id || cur.q != q {
            return Err(TmtError::Parse {
                line,
                msg: "geodesic ids are not consecutive per moment block".into(),
            });
        }
        cur.fan_ids.push((ba, da));
        cur.values.push(parse_f64(toks[4], line)?);
    }
    Ok(sinos)
}

fn write_text(report: &mut RunReport, dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::write(dir.join(name), text)?;
    report.files.push(name.into());
    Ok(())
}

fn save_field(report: &mut RunReport, dir: &Path, name: &str, f: &SymTensorField) -> Result<()> {
    write_field(&dir.join(name), f)?;
    report.files.push(name.into());
    let stem = name.trim_end_matches(".csv");
    let nc = f.ncomp();
    let mut gp = String::from("set datafile separator ','\nset pm3d map\nset size ratio -1\n");
    for c in 0..nc {
        let _ = writeln!(
            gp,
            "set title 'component {c}'\nsplot '{name}' using 1:2:{} with points pt 5 ps 0.6 palette\npause -1",
            c + 4
        );
    }
    write_text(report, dir, &format!("plot_{stem}.gp"), &gp)
}

fn save_sinogram(
    report: &mut RunReport,
    dir: &Path,
    name: &str,
    sinos: &[MomentSinogram],
) -> Result<()> {
    write_sinogram(&dir.join(name), sinos)?;
    report.files.push(name.into());
    let stem = name.trim_end_matches(".csv");
    let gp = format!(
        "set datafile separator ','\nset pm3d map\nset xlabel 'boundary angle'\nset ylabel 'direction angle'\nsplot '{name}' using 2:3:5 with points pt 5 ps 0.8 palette\npause -1\n"
    );
    write_text(report, dir, &format!("plot_{stem}.gp"), &gp)
}

fn save_curve(
    report: &mut RunReport,
    dir: &Path,
    name: &str,
    header: &str,
    rows: &[(f64, f64)],
) -> Result<()> {
    let mut out = format!("{header}\n");
    for (a, b) in rows {
        let _ = writeln!(out, "{a},{b}");
    }
    write_text(report, dir, name, &out)?;
    let stem = name.trim_end_matches(".csv");
    let gp = format!(
        "set datafile separator ','\nset logscale y\nplot '{name}' using 1:2 with linespoints\npause -1\n"
    );
    write_text(report, dir, &format!("plot_{stem}.gp"), &gp)
}

/// Run one named experiment, writing artifacts into `out_dir`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    experiment: &str,
    out_dir: &Path,
) -> Result<RunReport> {
    cfg.validate()?;
    if !EXPERIMENTS.contains(&experiment) {
        return Err(TmtError::Argument(format!(
            "unknown experiment `{experiment}`; expected one of {}",
            EXPERIMENTS.join(", ")
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut report = RunReport::new(experiment, cfg);
    match experiment {
        "forward" => run_forward(cfg, out_dir, &mut report)?,
        "identities" => run_identities(cfg, out_dir, &mut report)?,
        "decompose" => run_decompose(cfg, out_dir, &mut report)?,
        "cascade" => run_cascade(cfg, out_dir, &mut report)?,
        "tube" => run_tube(cfg, out_dir, &mut report)?,
        "support" => run_support(cfg, out_dir, &mut report)?,
        "simplicity" => run_simplicity(cfg, out_dir, &mut report)?,
        _ => unreachable!(),
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&mut report, out_dir, "report.json", &json)?;
    Ok(report)
}

struct Setup {
    g: MetricSpec,
    dom: DomainSpec,
    grid: Grid2,
    mask: Vec<bool>,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let g = cfg.metric_spec()?;
    let dom = DomainSpec::new(cfg.domain.radius);
    let grid = cfg.grid();
    let mask = disk_mask(&grid, &dom);
    Ok(Setup { g, dom, grid, mask })
}

fn fan_of(cfg: &ExperimentConfig, s: &Setup) -> Result<Vec<Geodesic>> {
    make_fan(&s.g, &s.dom, cfg.fan.n_points, cfg.fan.n_dirs, cfg.fan.step)
}

fn run_forward(cfg: &ExperimentConfig, dir: &Path, report: &mut RunReport) -> Result<()> {
    let s = setup(cfg)?;
    let fan = report.timed("make_fan", || fan_of(cfg, &s))?;
    let f = cfg.build_field(&s.grid, &s.mask)?;
    save_field(report, dir, "field.csv", &f)?;
    let sinos: Vec<MomentSinogram> = report.timed("moment_transform", || {
        cfg.moment_orders()
            .iter()
            .map(|&q| moment_transform(&f, &fan, q))
            .collect()
    });
    save_sinogram(report, dir, "sinogram.csv", &sinos)?;

    let drift = fan
        .iter()
        .map(|geo| geo.speed_drift(&s.g))
        .fold(0.0f64, f64::max);
    report.check_le("speed_drift_max", drift, 1e-6);
    if s.g.is_euclidean() {
        let r = s.dom.radius;
        let chord_err = fan
            .iter()
            .map(|geo| {
                let analytic = -2.0 * r * (geo.dir_angle - geo.boundary_angle).cos();
                (geo.exit_param() - analytic).abs()
            })
            .fold(0.0f64, f64::max);
        report.check_le("chord_error_max", chord_err, 1e-9);
    }
    if cfg.field.recipe == "constant" && cfg.m == 0 {
        // diametral chord of f = 1 integrates to the diameter
        let x = s.dom.boundary_point(0.0);
        let d = [-1.0, 0.0];
        let n = s.g.gnorm(x, d);
        let geo = trace_geodesic(&s.g, &s.dom, x, [d[0] / n, d[1] / n], cfg.fan.step)?;
        let val = moment_transform(&f, &[geo], 0).values[0];
        report.check_le(
            "diameter_chord_error",
            (val - 2.0 * s.dom.radius).abs(),
            1e-6,
        );
    }
    Ok(())
}

fn run_identities(cfg: &ExperimentConfig, dir: &Path, report: &mut RunReport) -> Result<()> {
    let s = setup(cfg)?;
    let fan = report.timed("make_fan", || fan_of(cfg, &s))?;
    // fine lattice for the finite-difference d; small amplitude keeps the
    // truncation error of the quadrature below the identity tolerances
    let n_fine = cfg.n.max(257) | 1;
    let r = cfg.domain.radius;
    let grid = Grid2::new(n_fine, n_fine, -r, r, -r, r);

    let kernel_max = report.timed("kernel_property", || {
        let mut worst = 0.0f64;
        for trial in 0..20u64 {
            let order = (trial % 3) as usize;
            let v = random_tensor_field(
                grid.clone(),
                full_mask(&grid),
                order,
                cfg.seed + trial,
                0.02,
                0.8 * r,
            );
            let dv = inner_derivative(&v, &s.g);
            worst = worst.max(moment_transform(&dv, &fan, 0).max_abs());
        }
        worst
    });
    report.check_le("kernel_max", kernel_max, 5e-5);

    // support strictly inside the rim so the t^k weight does not amplify
    // the interpolation error of the exit tail
    let v = random_tensor_field(grid.clone(), full_mask(&grid), 1, cfg.seed, 0.02, 0.9 * r);
    let dv = inner_derivative(&v, &s.g);
    let mut shift_rows = Vec::new();
    report.timed("moment_shift", || {
        for k in 1..=4usize {
            let lhs = moment_transform(&dv, &fan, k);
            let rhs = moment_transform(&v, &fan, k - 1);
            let worst = lhs
                .values
                .iter()
                .zip(rhs.values.iter())
                .map(|(a, b)| (a + k as f64 * b).abs())
                .fold(0.0f64, f64::max);
            shift_rows.push((k as f64, worst));
        }
    });
    for (k, worst) in &shift_rows {
        report.check_le(&format!("moment_shift_k{k}"), *worst, 5e-5);
    }
    save_curve(report, dir, "moment_shift.csv", "k,residual", &shift_rows)?;

    let gen_res = report.timed("generator_identity", || -> Result<f64> {
        let h_f = random_tensor_field(
            grid.clone(),
            full_mask(&grid),
            cfg.m.min(2),
            cfg.seed + 100,
            0.05,
            r,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 1);
        let samples: Vec<(Point, Vector)> = (0..200)
            .map(|_| {
                let rad = 0.7 * r * rng.gen::<f64>().sqrt();
                let a = rng.gen::<f64>() * std::f64::consts::TAU;
                let b = rng.gen::<f64>() * std::f64::consts::TAU;
                ([rad * a.cos(), rad * a.sin()], [b.cos(), b.sin()])
            })
            .collect();
        crate::transforms::generator_identity_check(&h_f, &s.g, &s.dom, &samples, 1e-4, 1e-3)
    })?;
    report.check_le("generator_residual", gen_res, 1e-4);
    Ok(())
}

fn run_decompose(cfg: &ExperimentConfig, dir: &Path, report: &mut RunReport) -> Result<()> {
    if cfg.m == 0 {
        return Err(config_err("m", "decomposition needs tensor order >= 1"));
    }
    let s = setup(cfg)?;
    let f = cfg.build_field(&s.grid, &s.mask)?;
    save_field(report, dir, "field.csv", &f)?;
    let dec = report.timed("solenoidal_decompose", || {
        crate::decomposition::solenoidal_decompose(&f, &s.g)
    })?;
    save_field(report, dir, "f_s.csv", &dec.f_s)?;
    save_field(report, dir, "v.csv", &dec.v)?;
    let scale = f.l2_norm().max(1e-300);
    report.check_le("div_residual", dec.div_residual, 1e-6 * scale);
    report.check_le("reassembly_residual", dec.reassembly_residual, 1e-6 * scale);
    let dv = inner_derivative(&dec.v, &s.g);
    let denom = (dec.f_s.l2_norm() * dv.l2_norm()).max(1e-300);
    report.check_le(
        "orthogonality",
        l2_inner(&dec.f_s, &dv, &s.g).abs() / denom,
        1e-4,
    );
    report.stat("cg_iterations", dec.iterations as f64);

    let multi = report.timed("multi_decompose", || {
        crate::decomposition::multi_decompose(&f, &s.g)
    })?;
    for (i, part) in multi.parts.iter().enumerate() {
        save_field(report, dir, &format!("part_{i}.csv"), part)?;
    }
    for (i, res) in multi.boundary_residuals.iter().enumerate() {
        report.check_le(&format!("multi_boundary_stage{i}"), *res, 1e-6 * scale);
    }
    Ok(())
}

fn run_cascade(cfg: &ExperimentConfig, dir: &Path, report: &mut RunReport) -> Result<()> {
    if cfg.m == 0 {
        return Err(config_err("m", "the cascade needs tensor order >= 1"));
    }
    let s = setup(cfg)?;
    let fan = report.timed("make_fan", || fan_of(cfg, &s))?;
    let f = cfg.build_field(&s.grid, &s.mask)?;
    save_field(report, dir, "field.csv", &f)?;
    let sinos: Vec<MomentSinogram> = report.timed("moment_transform", || {
        (0..=cfg.m).map(|q| moment_transform(&f, &fan, q)).collect()
    });
    save_sinogram(report, dir, "sinogram.csv", &sinos)?;

    // injectivity baseline: zero data reconstructs to zero
    let zeros: Vec<MomentSinogram> = sinos
        .iter()
        .map(|sn| MomentSinogram {
            q: sn.q,
            order: sn.order,
            fan_ids: sn.fan_ids.clone(),
            values: vec![0.0; sn.values.len()],
        })
        .collect();
    let rec0 = report.timed("zero_data_cascade", || {
        cascade_reconstruct(
            &zeros,
            &fan,
            &s.g,
            &s.grid,
            &s.mask,
            cfg.solver.lambda,
            None,
        )
    })?;
    report.check_le("zero_data_norm", rec0.f_hat.l2_norm(), 1e-6);

    let rec = report.timed("cascade_reconstruct", || {
        cascade_reconstruct(
            &sinos,
            &fan,
            &s.g,
            &s.grid,
            &s.mask,
            cfg.solver.lambda,
            Some(&f),
        )
    })?;
    save_field(report, dir, "f_hat.csv", &rec.f_hat)?;
    for (i, part) in rec.parts.iter().enumerate() {
        save_field(report, dir, &format!("v_hat_{i}.csv"), part)?;
    }
    report.check_le("rel_l2_error", rec.rel_l2_error.unwrap_or(f64::NAN), 0.08);
    let v0 = &rec.parts[0];
    let ratio = divergence(v0, &s.g).l2_norm() / v0.l2_norm().max(1e-300);
    report.check_le("stage0_div_ratio", ratio, 1e-3);
    for (k, (res, it)) in rec
        .stage_residuals
        .iter()
        .zip(rec.stage_iterations.iter())
        .enumerate()
    {
        report.stat(&format!("stage{k}_data_residual"), *res);
        report.stat(&format!("stage{k}_iterations"), *it as f64);
    }
    let rows: Vec<(f64, f64)> = rec
        .stage_residuals
        .iter()
        .enumerate()
        .map(|(k, r)| (k as f64, *r))
        .collect();
    save_curve(report, dir, "stage_residuals.csv", "stage,residual", &rows)?;
    Ok(())
}

/// Smooth dense trig field on the chart rectangle with seeded coefficients.
fn chart_test_field(gr: &Grid2, order: usize, rng: &mut ChaCha8Rng, amp: f64) -> SymTensorField {
    let nc = component_count(2, order);
    let coef: Vec<[f64; 5]> = (0..nc)
        .map(|_| {
            let mut c = [0.0; 5];
            for slot in c.iter_mut() {
                *slot = rng.gen_range(-amp..amp);
            }
            c
        })
        .collect();
    let mut out = SymTensorField::zeros(gr.clone(), order, vec![true; gr.len()]);
    for node in 0..gr.len() {
        let (xp, xn) = gr.coords_of(node);
        for (c, co) in coef.iter().enumerate() {
            out.data[node * nc + c] = co[0] * (1.3 * xn + 0.4).sin() * (1.0 * xp).cos()
                + co[1] * (0.7 * xn).cos()
                + co[2] * 0.5 * xp * xn
                + co[3] * (2.1 * xn).sin()
                + co[4] * (1.5 * xp + 0.3).sin();
        }
    }
    out
}

/// Claim-1 residual: max |∂^l_ξ' w(x, e_n)| over `points` tube points and
/// all transversal derivative orders l ≤ m−1, where w is the ray primitive
/// of h = f − dv and v is built from ξ-derivatives of the primitive of f.
pub fn claim1_residual<M: MetricField>(
    g: &M,
    dom: &DomainSpec,
    m: usize,
    seed: u64,
    points: &[Point],
    frame: [Vector; 2],
) -> Result<f64> {
    let r = dom.radius;
    let world = Grid2::new(97, 97, -1.2 * r, 1.2 * r, -1.2 * r, 1.2 * r);
    let f = random_tensor_field(world.clone(), full_mask(&world), m, seed, 0.05, 0.7 * r);
    // v from the invariant ray-primitive construction, sampled on the lattice
    let nodes: Vec<usize> = (0..world.len()).collect();
    use rayon::prelude::*;
    // v comes back in the frame basis; convert to world components for d
    let det = frame[0][0] * frame[1][1] - frame[0][1] * frame[1][0];
    let to_world = [
        frame[1][1] / det,
        -frame[1][0] / det,
        -frame[0][1] / det,
        frame[0][0] / det,
    ];
    let tensors: Vec<SymTensor> = nodes
        .par_iter()
        .map(|&node| {
            let (x, y) = world.coords_of(node);
            v_from_ray_primitive(&f, g, dom, [x, y], frame, 0.05, 5e-3)
                .and_then(|t| t.pull_back(&to_world))
        })
        .collect::<Result<Vec<SymTensor>>>()?;
    let mut v = SymTensorField::zeros(world.clone(), m - 1, full_mask(&world));
    for (node, t) in tensors.iter().enumerate() {
        v.set_tensor(node, t);
    }
    let mut h = f.clone();
    h.axpy(-1.0, &inner_derivative(&v, g));
    let mut worst = 0.0f64;
    for &x in points {
        for l in 0..m {
            let deriv = vec![1u8; l];
            let d = ray_xi_derivative(&h, g, dom, x, frame, &deriv, 0.05, 5e-3)?;
            worst = worst.max(d.abs());
        }
    }
    Ok(worst)
}

fn run_tube(cfg: &ExperimentConfig, dir: &Path, report: &mut RunReport) -> Result<()> {
    if cfg.m == 0 {
        return Err(config_err("m", "the tube cascade needs tensor order >= 1"));
    }
    let s = setup(cfg)?;
    let tilt = if s.g.is_euclidean() { 0.0 } else { 0.05 };
    let x0 = [-s.dom.radius, tilt];
    let d0 = [1.0, 0.0];
    let n0 = s.g.gnorm(x0, d0);
    let gamma0 = trace_geodesic(&s.g, &s.dom, x0, [d0[0] / n0, d0[1] / n0], 2e-3)?;
    let n_long = if cfg.m <= 2 { 401 } else { 801 };
    let chart = report.timed("build_chart", || {
        build_chart_retrying(&s.g, &s.dom, &gamma0, 0.08, 33, n_long)
    })?;
    write_text(report, dir, "chart.csv", &chart.dump_csv())?;
    report.check_le("chart_offdiag_max", chart.max_offdiag, 1e-4);
    report.check_le("chart_gamma_max", chart.max_gamma_n, 1e-3);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let f = chart_test_field(&chart.grid, cfg.m, &mut rng, 0.5 * cfg.field.amp);
    let res = report.timed("cascade_solve", || cascade_solve(&f, &chart))?;
    save_field(report, dir, "v_chart.csv", &res.v)?;
    save_field(report, dir, "h_chart.csv", &res.h)?;
    report.check_le(
        "cascade_normal_residual",
        res.normal_residual,
        1e-3 * f.linf_norm(),
    );

    // appendix expansion of (dv)_{n..n i_k..i_1} against the generic d
    let exp_rel = report.timed("dv_expansion", || -> Result<f64> {
        let mut worst = 0.0f64;
        let v = chart_test_field(&chart.grid, cfg.m - 1, &mut rng, 1.0);
        let dv = inner_derivative(&v, &chart.metric);
        let scale = dv.linf_norm().max(1e-12);
        for k in 0..=cfg.m {
            let table = dv_normal_expansion(&v, &chart, k)?;
            let mut multi = vec![2u8; cfg.m];
            for slot in multi.iter_mut().take(k) {
                *slot = 1;
            }
            let c = crate::symtensor::pack_index(2, &multi)?;
            for node in 0..chart.grid.len() {
                worst = worst.max((table[node] - dv.comp_at(node, c)).abs() / scale);
            }
        }
        Ok(worst)
    })?;
    report.check_le("dv_expansion_rel_max", exp_rel, 1e-3);

    if s.g.is_euclidean() && cfg.m == 2 {
        let frame = [[0.0, 1.0], [1.0, 0.0]];
        let pts: Vec<Point> = vec![[-0.4, tilt], [0.0, tilt], [0.35, tilt]];
        let c1 = report.timed("claim1", || {
            claim1_residual(&s.g, &s.dom, cfg.m, cfg.seed, &pts, frame)
        })?;
        report.check_le("claim1_residual", c1, 1e-3);
    }
    Ok(())
}

fn run_support(cfg: &ExperimentConfig, dir: &Path, report: &mut RunReport) -> Result<()> {
    let kc = cfg
        .convex_set
        .ok_or_else(|| config_err("convex_set", "the support experiment needs a convex set"))?;
    let k_set = ConvexSet {
        center: kc.center,
        radius: kc.radius,
    };
    let s = setup(cfg)?;
    let f = cfg.build_field(&s.grid, &s.mask)?;
    save_field(report, dir, "field.csv", &f)?;
    let rep = report.timed("support_experiment", || {
        support_experiment(
            &f,
            &k_set,
            &s.g,
            &s.dom,
            cfg.fan.n_points,
            cfg.fan.n_dirs,
            cfg.fan.step,
            cfg.solver.lambda,
        )
    })?;
    let fwd_max = rep.forward_max.iter().fold(0.0f64, |a, &b| a.max(b));
    report.check_le("avoiding_forward_max", fwd_max, 1e-6);
    report.check_le(
        "covered_reconstruction_norm",
        rep.covered_norm,
        1e-4 * rep.avoiding_count as f64,
    );
    report.stat("avoiding_count", rep.avoiding_count as f64);
    report.stat("covered_nodes", rep.covered_nodes as f64);
    let rows: Vec<(f64, f64)> = rep
        .stage_residuals
        .iter()
        .enumerate()
        .map(|(k, r)| (k as f64, *r))
        .collect();
    save_curve(report, dir, "stage_residuals.csv", "stage,residual", &rows)?;
    Ok(())
}

fn run_simplicity(cfg: &ExperimentConfig, _dir: &Path, report: &mut RunReport) -> Result<()> {
    let s = setup(cfg)?;
    let rep = report.timed("simplicity_check", || {
        simplicity_check(
            &s.g,
            &s.dom,
            cfg.fan.n_points,
            cfg.fan.n_dirs,
            cfg.fan.step,
        )
    });
    report.check_gt("convexity_margin", rep.convexity_margin, 0.0);
    report.check_le("trapped_geodesics", rep.trapped_geodesics as f64, 0.0);
    report.check_le("conjugate_points", rep.conjugate_points as f64, 0.0);
    report.stat("jacobi_min", rep.jacobi_min);
    Ok(())
}

/// Resolve the output directory: CLI flag, then config, then `TMT_OUT`,
/// then `./tmt_out`.
pub fn resolve_out_dir(cli_out: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = cli_out {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.out {
        return PathBuf::from(p);
    }
    if let Ok(p) = std::env::var("TMT_OUT") {
        if !p.is_empty() {
            return PathBuf::from(p);
        }
    }
    PathBuf::from("tmt_out")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_cfg(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("config.json");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let tmp = tempfile::tempdir().unwrap();
        let p = write_cfg(tmp.path(), r#"{"metric": "euclidean", "m": 1}"#);
        let cfg = load_config(&p).unwrap();
        assert_eq!(cfg.n, 64);
        assert_eq!(cfg.fan.n_points, 64);
        assert_eq!(cfg.fan.n_dirs, 32);
        assert_eq!(cfg.solver.lambda, 1e-3);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.moment_orders(), vec![0, 1]);
    }

    #[test]
    fn negative_radius_names_the_key_path() {
        let tmp = tempfile::tempdir().unwrap();
        let p = write_cfg(tmp.path(), r#"{"domain": {"radius": -1.0}}"#);
        match load_config(&p) {
            Err(TmtError::Config { path, .. }) => assert_eq!(path, "domain.radius"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn moment_order_above_m_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let p = write_cfg(tmp.path(), r#"{"m": 1, "moments": [0, 3]}"#);
        match load_config(&p) {
            Err(TmtError::Config { path, .. }) => assert_eq!(path, "moments"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_number() {
        let tmp = tempfile::tempdir().unwrap();
        let p = write_cfg(tmp.path(), "{\n  \"metrc\": \"euclidean\"\n}");
        match load_config(&p) {
            Err(TmtError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn field_round_trip_is_bitwise() {
        let tmp = tempfile::tempdir().unwrap();
        let grid = Grid2::square(32);
        let f = random_tensor_field(grid.clone(), full_mask(&grid), 2, 9, 1.0, 0.8);
        let p = tmp.path().join("f.csv");
        write_field(&p, &f).unwrap();
        let back = read_field(&p).unwrap();
        assert_eq!(back.order, f.order);
        assert_eq!(back.mask, f.mask);
        assert_eq!(back.data, f.data);
        // serialization is idempotent byte for byte
        let p2 = tmp.path().join("f2.csv");
        write_field(&p2, &back).unwrap();
        assert_eq!(
            std::fs::read(&p).unwrap(),
            std::fs::read(&p2).unwrap()
        );
    }

    #[test]
    fn field_header_mismatch_is_a_parse_error() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("bad.csv");
        std::fs::write(&p, "x1,x2,mask,c_1,c_11\n0,0,1,0,0\n").unwrap();
        match read_field(&p) {
            Err(TmtError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn field_bad_number_reports_its_line() {
        let tmp = tempfile::tempdir().unwrap();
        let grid = Grid2::square(4);
        let f = SymTensorField::zeros(grid, 0, vec![true; 16]);
        let p = tmp.path().join("f.csv");
        write_field(&p, &f).unwrap();
        let mut rows: Vec<String> =
            std::fs::read_to_string(&p).unwrap().lines().map(String::from).collect();
        rows[3] = rows[3].replacen(',', ",xyz", 1); // corrupt row 3's x2 entry
        std::fs::write(&p, rows.join("\n")).unwrap();
        match read_field(&p) {
            Err(TmtError::Parse { line, .. }) => assert!(line > 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn sinogram_round_trip_preserves_ordering() {
        let tmp = tempfile::tempdir().unwrap();
        let gm = MetricSpec::euclidean();
        let dom = DomainSpec::new(1.0);
        let grid = Grid2::square(17);
        let f = random_tensor_field(grid.clone(), full_mask(&grid), 1, 3, 1.0, 0.8);
        let fan = make_fan(&gm, &dom, 6, 3, 5e-3).unwrap();
        let sinos: Vec<MomentSinogram> =
            (0..=1).map(|q| moment_transform(&f, &fan, q)).collect();
        let p = tmp.path().join("s.csv");
        write_sinogram(&p, &sinos).unwrap();
        let back = read_sinogram(&p, 1).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in sinos.iter().zip(back.iter()) {
            assert_eq!(a.q, b.q);
            assert_eq!(a.fan_ids, b.fan_ids);
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn forward_experiment_constant_scalar_hits_the_diameter() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            m: 0,
            n: 33,
            fan: FanConfig {
                n_points: 8,
                n_dirs: 4,
                step: 1e-3,
            },
            field: FieldConfig {
                recipe: "constant".into(),
                ..FieldConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let report = run_experiment(&cfg, "forward", tmp.path()).unwrap();
        let row = report
            .checks
            .iter()
            .find(|c| c.name == "diameter_chord_error")
            .unwrap();
        assert!(row.pass, "diameter chord error {}", row.value);
        assert!(report.passed());
        assert!(tmp.path().join("sinogram.csv").exists());
        assert!(tmp.path().join("plot_field.gp").exists());
        assert!(tmp.path().join("report.json").exists());
    }

    #[test]
    fn forward_experiment_is_deterministic() {
        let t1 = tempfile::tempdir().unwrap();
        let t2 = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            m: 1,
            n: 17,
            fan: FanConfig {
                n_points: 6,
                n_dirs: 3,
                step: 5e-3,
            },
            field: FieldConfig {
                recipe: "random".into(),
                ..FieldConfig::default()
            },
            ..ExperimentConfig::default()
        };
        run_experiment(&cfg, "forward", t1.path()).unwrap();
        run_experiment(&cfg, "forward", t2.path()).unwrap();
        for name in ["field.csv", "sinogram.csv"] {
            assert_eq!(
                std::fs::read(t1.path().join(name)).unwrap(),
                std::fs::read(t2.path().join(name)).unwrap(),
                "{name} differs between identical runs"
            );
        }
    }

    #[test]
    fn identities_experiment_reports_the_moment_shift_margin() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            m: 2,
            fan: FanConfig {
                n_points: 8,
                n_dirs: 4,
                step: 1e-3,
            },
            ..ExperimentConfig::default()
        };
        let report = run_experiment(&cfg, "identities", tmp.path()).unwrap();
        for k in 1..=4 {
            let row = report
                .checks
                .iter()
                .find(|c| c.name == format!("moment_shift_k{k}"))
                .unwrap();
            assert_eq!(row.threshold, 5e-5);
            assert!(row.pass, "k={k}: margin {}", row.value);
        }
        assert!(report.checks.iter().any(|c| c.name == "kernel_max" && c.pass));
    }

    #[test]
    fn simplicity_experiment_passes_euclidean_and_fails_focusing() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig {
            fan: FanConfig {
                n_points: 12,
                n_dirs: 6,
                step: 2e-3,
            },
            ..ExperimentConfig::default()
        };
        let ok = run_experiment(&cfg, "simplicity", tmp.path()).unwrap();
        assert!(ok.passed());
        cfg.metric = "-2.0*(x1^2 + x2^2)".into();
        let bad = run_experiment(&cfg, "simplicity", tmp.path()).unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn unknown_experiment_is_an_argument_error() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        match run_experiment(&cfg, "frobnicate", tmp.path()) {
            Err(e @ TmtError::Argument(_)) => assert_eq!(e.exit_code(), 2),
            other => panic!("expected argument error, got {other:?}"),
        }
    }

    #[test]
    fn support_needs_a_convex_set() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        match run_experiment(&cfg, "support", tmp.path()) {
            Err(TmtError::Config { path, .. }) => assert_eq!(path, "convex_set"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn out_dir_resolution_prefers_cli_then_config() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(
            resolve_out_dir(Some(Path::new("cli")), &cfg),
            PathBuf::from("cli")
        );
        cfg.out = Some("from_cfg".into());
        assert_eq!(resolve_out_dir(None, &cfg), PathBuf::from("from_cfg"));
    }
}
