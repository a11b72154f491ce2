use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{CandidateSourceKind, ExperimentConfig, ExperimentOutput, Table, Value};
use crate::blr::{final_layer_posterior, log_marginal_likelihood_spectral};
use crate::construct::{
    factor_gram_nonneg, optimal_log_marginal, projected_optimal_gram, EquivalenceClass, GaussianCandidates,
};
use crate::data::{generate_dataset, generate_test_points, Dataset, NetworkShape, TestPoint};
use crate::error::{Error, Result};
use crate::features::forward_features;
use crate::mixture::{
    evaluate_candidates, local_mode_count, mixture_moments, pdf_eval, significant_component_count, support,
    uniform_grid, PredictiveRun,
};
use crate::rng::{tags, RngPolicy};
use crate::source::CandidateSource;

/// One grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub d: usize,
    pub n: usize,
    pub p: usize,
    pub noise_var: f64,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d={} n={} p={} noise_var={}", self.d, self.n, self.p, self.noise_var)
    }
}

impl Cell {
    fn prefix(&self) -> Vec<Value> {
        vec![self.d.into(), self.n.into(), self.p.into(), self.noise_var.into()]
    }

    fn tag(&self) -> String {
        format!("d{}_n{}_p{}_v{}", self.d, self.n, self.p, self.noise_var)
    }

    fn shape(&self, cfg: &ExperimentConfig) -> Result<NetworkShape> {
        NetworkShape::two_layer(self.d, self.p, cfg.activation)
    }

    /// Datasets depend on `(d, n, realization)` only, so every width and noise
    /// level at the same `(d, n)` sees the same inputs.
    fn dataset(&self, cfg: &ExperimentConfig, realization: usize) -> Result<Dataset> {
        let seed = RngPolicy::new(cfg.seed)
            .child(&[self.d as u64, self.n as u64, realization as u64], tags::CELL_DATA)
            .master_seed;
        generate_dataset(self.d, self.n, self.noise_var, cfg.target_generator, seed)
    }

    fn candidate_seed(&self, cfg: &ExperimentConfig, realization: usize) -> u64 {
        RngPolicy::new(cfg.seed)
            .child(
                &[self.d as u64, self.n as u64, self.p as u64, realization as u64],
                tags::CELL_CANDIDATES,
            )
            .master_seed
    }

    fn test_points(&self, cfg: &ExperimentConfig, m: usize, realization: usize) -> Result<Vec<TestPoint>> {
        let seed = RngPolicy::new(cfg.seed)
            .child(&[self.d as u64, realization as u64], tags::CELL_TESTS)
            .master_seed;
        generate_test_points(self.d, m, seed)
    }

    fn gaussian(&self, cfg: &ExperimentConfig, realization: usize) -> Result<GaussianCandidates> {
        GaussianCandidates::new(
            self.shape(cfg)?,
            cfg.j_count,
            cfg.prior(),
            self.candidate_seed(cfg, realization),
        )
    }

    fn class(&self, cfg: &ExperimentConfig, data: &Dataset, realization: usize) -> Result<EquivalenceClass> {
        EquivalenceClass::new(
            data,
            &self.shape(cfg)?,
            cfg.class_spec_or_default(),
            self.candidate_seed(cfg, realization),
        )
    }

    fn predictive(&self, cfg: &ExperimentConfig, data: &Dataset, tests: &[TestPoint]) -> Result<PredictiveRun> {
        let shape = self.shape(cfg)?;
        match cfg.candidate_source {
            CandidateSourceKind::Gaussian => evaluate_candidates(&self.gaussian(cfg, 0)?, data, tests, &shape),
            CandidateSourceKind::EquivalenceClass => {
                evaluate_candidates(&self.class(cfg, data, 0)?, data, tests, &shape)
            }
        }
    }
}

fn scaled(ratio: f64, base: usize) -> usize {
    ((ratio * base as f64).round() as usize).max(1)
}

/// The `(d, n/d, p/d, noise)` grid in row-major order.
fn grid_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &d in &cfg.d_list {
        for &nr in &cfg.n_over_d {
            for &pr in &cfg.p_over_d {
                for &g in &cfg.noise_var_list {
                    cells.push(Cell {
                        d,
                        n: scaled(nr, d),
                        p: scaled(pr, d),
                        noise_var: g,
                    });
                }
            }
        }
    }
    cells
}

fn require_source(cfg: &ExperimentConfig, want: CandidateSourceKind, experiment: &str) -> Result<()> {
    cfg.validate()?;
    if cfg.candidate_source != want {
        return Err(Error::invalid(format!(
            "{experiment} needs candidate_source = {}",
            serde_json::to_string(&want)?
        )));
    }
    Ok(())
}

/// Appends one row per cell: the cell prefix, then either the values and an
/// empty error column or empty values and the error message.
fn push_rows(
    table: &mut Table,
    failures: &mut Vec<String>,
    prefix: Vec<Value>,
    label: &str,
    result: Result<Vec<Value>>,
) {
    let width = table.columns.len() - prefix.len() - 1;
    let mut row = prefix;
    match result {
        Ok(vals) => {
            debug_assert_eq!(vals.len(), width);
            row.extend(vals);
            row.push(Value::Empty);
        }
        Err(e) => {
            row.extend(std::iter::repeat_n(Value::Empty, width));
            row.push(e.to_string().into());
            failures.push(format!("{label}: {e}"));
        }
    }
    table.push(row);
}

fn population_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Significant-component counts over the grid with Gaussian candidates.
pub fn run_heatmap(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    require_source(cfg, CandidateSourceKind::Gaussian, "heatmap")?;
    let cells = grid_cells(cfg);
    let results: Vec<Result<Vec<Value>>> = cells
        .par_iter()
        .map(|cell| {
            let data = cell.dataset(cfg, 0)?;
            let tests = cell.test_points(cfg, 1, 0)?;
            let run = cell.predictive(cfg, &data, &tests)?;
            let mix = run.mixture(0)?;
            let count = significant_component_count(&mix, cfg.threshold);
            let (_, var) = mixture_moments(&mix);
            let per_n: Vec<f64> = run.log_marginals.iter().map(|l| l / cell.n as f64).collect();
            let max_w = mix.weights.iter().copied().fold(0.0, f64::max);
            Ok(vec![
                count.into(),
                (count as f64 / cfg.j_count as f64).into(),
                (count.max(1) as f64).log10().into(),
                var.into(),
                population_sd(&per_n).into(),
                max_w.into(),
            ])
        })
        .collect();
    let mut table = Table::new(
        "heatmap",
        &[
            "d",
            "n",
            "p",
            "noise_var",
            "n_significant",
            "significant_fraction",
            "log10_n_significant",
            "mixture_variance",
            "logL_spread",
            "max_weight",
            "error",
        ],
    );
    let mut failures = Vec::new();
    for (cell, r) in cells.iter().zip(results) {
        push_rows(&mut table, &mut failures, cell.prefix(), &cell.to_string(), r);
    }
    Ok(ExperimentOutput {
        experiment: "heatmap",
        tables: vec![table],
        failures,
    })
}

/// Density grids and component lists for every cell and test point.
pub fn run_pdf_dump(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let cells = grid_cells(cfg);
    // per test point: summary values and the density table
    type PerTest = Vec<(Vec<Value>, Table)>;
    let results: Vec<Result<PerTest>> = cells
        .par_iter()
        .map(|cell| {
            let data = cell.dataset(cfg, 0)?;
            let tests = cell.test_points(cfg, cfg.n_test_points, 0)?;
            let run = cell.predictive(cfg, &data, &tests)?;
            (0..tests.len())
                .map(|t| {
                    let mix = run.mixture(t)?;
                    let (lo, hi) = support(&mix, 5.0);
                    let grid = uniform_grid(lo, hi, cfg.grid_points);
                    let dens = pdf_eval(&mix, &grid)?;
                    let name = format!("pdf_{}_t{t}", cell.tag());
                    let mut table = Table::new(&name, &["kind", "index", "x", "density", "weight", "mean", "sd"]);
                    for (i, (x, f)) in grid.iter().zip(&dens).enumerate() {
                        table.push(vec![
                            "grid".into(),
                            i.into(),
                            (*x).into(),
                            (*f).into(),
                            Value::Empty,
                            Value::Empty,
                            Value::Empty,
                        ]);
                    }
                    for j in 0..mix.len() {
                        table.push(vec![
                            "component".into(),
                            j.into(),
                            Value::Empty,
                            Value::Empty,
                            mix.weights[j].into(),
                            mix.means[j].into(),
                            mix.sds[j].into(),
                        ]);
                    }
                    let (mean, var) = mixture_moments(&mix);
                    let summary = vec![
                        significant_component_count(&mix, cfg.threshold).into(),
                        local_mode_count(&mix, cfg.grid_points)?.into(),
                        mean.into(),
                        var.into(),
                        format!("{name}.csv").into(),
                    ];
                    Ok((summary, table))
                })
                .collect()
        })
        .collect();
    let mut summary = Table::new(
        "pdf_summary",
        &[
            "d",
            "n",
            "p",
            "noise_var",
            "test_point",
            "n_significant",
            "n_local_modes",
            "mean",
            "variance",
            "file",
            "error",
        ],
    );
    let mut tables = Vec::new();
    let mut failures = Vec::new();
    for (cell, r) in cells.iter().zip(results) {
        match r {
            Ok(per_test) => {
                for (t, (vals, table)) in per_test.into_iter().enumerate() {
                    let mut prefix = cell.prefix();
                    prefix.push(t.into());
                    push_rows(&mut summary, &mut failures, prefix, "", Ok(vals));
                    tables.push(table);
                }
            }
            Err(e) => {
                let mut prefix = cell.prefix();
                prefix.push(Value::Empty);
                push_rows(&mut summary, &mut failures, prefix, &cell.to_string(), Err(e));
            }
        }
    }
    tables.insert(0, summary);
    Ok(ExperimentOutput {
        experiment: "pdf_dump",
        tables,
        failures,
    })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Mean and standard error, over dataset realizations, of the median mixture
/// variance across test points, with equivalence-class candidates.
pub fn run_variance_scaling(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    require_source(cfg, CandidateSourceKind::EquivalenceClass, "variance scaling")?;
    let mut cells = Vec::new();
    for &d in &cfg.d_list {
        for &nr in &cfg.n_over_d {
            let n = scaled(nr, d);
            for &pr in &cfg.p_over_n {
                for &g in &cfg.noise_var_list {
                    cells.push((
                        nr,
                        pr,
                        Cell {
                            d,
                            n,
                            p: scaled(pr, n),
                            noise_var: g,
                        },
                    ));
                }
            }
        }
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.n_y_realizations).map(move |r| (c, r)))
        .collect();
    let medians: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let cell = &cells[c].2;
            if cell.n > cell.d {
                return Err(Error::infeasible(format!("n = {} exceeds d = {}", cell.n, cell.d)));
            }
            let data = cell.dataset(cfg, r)?;
            let tests = cell.test_points(cfg, cfg.n_test_points, r)?;
            let class = cell.class(cfg, &data, r)?;
            let run = evaluate_candidates(&class, &data, &tests, &cell.shape(cfg)?)?;
            let mut vars = (0..tests.len())
                .map(|t| Ok(mixture_moments(&run.mixture(t)?).1))
                .collect::<Result<Vec<f64>>>()?;
            Ok(median(&mut vars))
        })
        .collect();
    let mut summary = Table::new(
        "variance_scaling",
        &[
            "d",
            "n",
            "p",
            "noise_var",
            "n_over_d",
            "p_over_n",
            "mean_median_variance",
            "standard_error",
            "n_realizations",
            "error",
        ],
    );
    let mut per_real = Table::new(
        "variance_scaling_realizations",
        &["d", "n", "p", "noise_var", "realization", "median_variance", "error"],
    );
    let mut failures = Vec::new();
    let mut it = medians.into_iter();
    for (nr, pr, cell) in &cells {
        let mut ok = Vec::new();
        let mut first_err = None;
        for r in 0..cfg.n_y_realizations {
            let res = it.next().expect("one result per job");
            let mut prefix = cell.prefix();
            prefix.push(r.into());
            match res {
                Ok(m) => {
                    ok.push(m);
                    per_real.push([prefix, vec![m.into(), Value::Empty]].concat());
                }
                Err(e) => {
                    per_real.push([prefix, vec![Value::Empty, e.to_string().into()]].concat());
                    first_err.get_or_insert(e);
                }
            }
        }
        let mut prefix = cell.prefix();
        prefix.extend([(*nr).into(), (*pr).into()]);
        let result = match first_err {
            Some(e) => Err(e),
            None => {
                let k = ok.len() as f64;
                let mean = ok.iter().sum::<f64>() / k;
                let se = if ok.len() > 1 {
                    (ok.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() / k.sqrt()
                } else {
                    0.0
                };
                Ok(vec![mean.into(), se.into(), ok.len().into()])
            }
        };
        push_rows(&mut summary, &mut failures, prefix, &cell.to_string(), result);
    }
    Ok(ExperimentOutput {
        experiment: "variance_scaling",
        tables: vec![summary, per_real],
        failures,
    })
}

/// Scaled log marginal at the projected ReLU-feasible optimum minus the best
/// Gaussian candidate, with the unconstrained optimum as an upper reference.
pub fn run_optimality_gap(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    require_source(cfg, CandidateSourceKind::Gaussian, "optimality gap")?;
    let cells = grid_cells(cfg);
    let results: Vec<Result<Vec<Value>>> = cells
        .par_iter()
        .map(|cell| {
            let data = cell.dataset(cfg, 0)?;
            let n = cell.n as f64;
            let target = projected_optimal_gram(data.x1(), data.y(), data.noise_var())?;
            let features = factor_gram_nonneg(&target, cell.p)?;
            let conj = log_marginal_likelihood_spectral(&features, data.y(), data.noise_var(), cell.p)? / n;
            let bound = optimal_log_marginal(data.y(), data.noise_var())? / n;
            let run = evaluate_candidates(&cell.gaussian(cfg, 0)?, &data, &[], &cell.shape(cfg)?)?;
            let best = run.log_marginals.iter().copied().fold(f64::NEG_INFINITY, f64::max) / n;
            Ok(vec![
                conj.into(),
                best.into(),
                (conj - best).into(),
                bound.into(),
                (bound - conj).into(),
                usize::from(cell.n <= cell.d).into(),
            ])
        })
        .collect();
    let mut table = Table::new(
        "optimality_gap",
        &[
            "d",
            "n",
            "p",
            "noise_var",
            "conjectured_scaled_logL",
            "max_gaussian_scaled_logL",
            "gap",
            "bound_scaled_logL",
            "bound_minus_conjectured",
            "n_le_d",
            "error",
        ],
    );
    let mut failures = Vec::new();
    for (cell, r) in cells.iter().zip(results) {
        push_rows(&mut table, &mut failures, cell.prefix(), &cell.to_string(), r);
    }
    Ok(ExperimentOutput {
        experiment: "optimality_gap",
        tables: vec![table],
        failures,
    })
}

/// Fixed-range histogram with running moments. Out-of-range values land in
/// the edge bins.
#[derive(Debug, Clone)]
struct Hist {
    lo: f64,
    hi: f64,
    counts: Vec<u64>,
    sum: f64,
    sum_sq: f64,
    n: u64,
}

impl Hist {
    fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self {
            lo,
            hi,
            counts: vec![0; bins],
            sum: 0.0,
            sum_sq: 0.0,
            n: 0,
        }
    }

    fn add(&mut self, x: f64) {
        let bins = self.counts.len();
        let pos = ((x - self.lo) / (self.hi - self.lo) * bins as f64).floor();
        let b = if pos < 0.0 { 0 } else { (pos as usize).min(bins - 1) };
        self.counts[b] += 1;
        self.sum += x;
        self.sum_sq += x * x;
        self.n += 1;
    }

    fn merge(&mut self, other: &Hist) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        self.n += other.n;
    }

    fn sd(&self) -> f64 {
        let n = self.n as f64;
        let mean = self.sum / n;
        (self.sum_sq / n - mean * mean).max(0.0).sqrt()
    }

    fn edges(&self, b: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + b as f64 * w, self.lo + (b + 1) as f64 * w)
    }
}

struct PriorComparison {
    theta: [Hist; 2],
    w: [Hist; 2],
    theta_ref: f64,
    w_ref: f64,
}

fn prior_comparison_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<PriorComparison> {
    let data = cell.dataset(cfg, 0)?;
    let class = cell.class(cfg, &data, 0)?;
    let shape = cell.shape(cfg)?;
    let theta_ref = cfg.prior().entry_sd(cell.d);
    let w_ref = 1.0 / (cell.p as f64).sqrt();
    let bins = cfg.hist_bins;
    let per: Vec<Result<(Hist, Hist)>> = (0..class.len())
        .into_par_iter()
        .map(|j| {
            let theta = class.candidate(j)?;
            let mut th = Hist::new(-5.0 * theta_ref, 5.0 * theta_ref, bins);
            for layer in &theta.layers {
                layer.weights.iter().for_each(|v| th.add(*v));
            }
            let feats = forward_features(&theta, data.x1(), &shape)?;
            let post = final_layer_posterior(&feats, data.y(), data.noise_var(), cell.p)?;
            let mut wh = Hist::new(-5.0 * w_ref, 5.0 * w_ref, bins);
            post.mean.iter().for_each(|v| wh.add(*v));
            Ok((th, wh))
        })
        .collect();
    let mut theta_c = Hist::new(-5.0 * theta_ref, 5.0 * theta_ref, bins);
    let mut w_c = Hist::new(-5.0 * w_ref, 5.0 * w_ref, bins);
    for r in per {
        let (th, wh) = r?;
        theta_c.merge(&th);
        w_c.merge(&wh);
    }
    let policy = RngPolicy::new(cell_prior_seed(cfg, cell));
    let mut theta_p = Hist::new(-5.0 * theta_ref, 5.0 * theta_ref, bins);
    let mut rng = policy.stream(0, tags::PRIOR_DRAW);
    for _ in 0..theta_c.n {
        theta_p.add(theta_ref * rng.sample::<f64, _>(StandardNormal));
    }
    let mut w_p = Hist::new(-5.0 * w_ref, 5.0 * w_ref, bins);
    let mut rng = policy.stream(1, tags::PRIOR_DRAW);
    for _ in 0..w_c.n {
        w_p.add(w_ref * rng.sample::<f64, _>(StandardNormal));
    }
    Ok(PriorComparison {
        theta: [theta_c, theta_p],
        w: [w_c, w_p],
        theta_ref,
        w_ref,
    })
}

fn cell_prior_seed(cfg: &ExperimentConfig, cell: &Cell) -> u64 {
    RngPolicy::new(cfg.seed)
        .child(&[cell.d as u64, cell.n as u64, cell.p as u64], tags::PRIOR_DRAW)
        .master_seed
}

/// Histograms of constructed interior weights and posterior-mean final-layer
/// weights against draws from the corresponding Gaussian priors.
pub fn run_prior_comparison(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    require_source(cfg, CandidateSourceKind::EquivalenceClass, "prior comparison")?;
    let cells = grid_cells(cfg);
    let results: Vec<Result<PriorComparison>> = cells.par_iter().map(|c| prior_comparison_cell(cfg, c)).collect();
    let mut summary = Table::new(
        "prior_comparison",
        &[
            "d",
            "n",
            "p",
            "noise_var",
            "quantity",
            "constructed_sd",
            "prior_sample_sd",
            "prior_sd",
            "constructed_count",
            "prior_count",
            "error",
        ],
    );
    let mut hist = Table::new(
        "prior_comparison_hist",
        &[
            "d",
            "n",
            "p",
            "noise_var",
            "quantity",
            "source",
            "bin",
            "lo",
            "hi",
            "count",
        ],
    );
    let mut failures = Vec::new();
    for (cell, r) in cells.iter().zip(results) {
        match r {
            Ok(pc) => {
                for (name, pair, reference) in [("theta", &pc.theta, pc.theta_ref), ("w", &pc.w, pc.w_ref)] {
                    let mut prefix = cell.prefix();
                    prefix.push(name.into());
                    let vals = vec![
                        pair[0].sd().into(),
                        pair[1].sd().into(),
                        reference.into(),
                        (pair[0].n as usize).into(),
                        (pair[1].n as usize).into(),
                    ];
                    push_rows(&mut summary, &mut failures, prefix, "", Ok(vals));
                    for (source, h) in [("constructed", &pair[0]), ("prior", &pair[1])] {
                        for (b, c) in h.counts.iter().enumerate() {
                            let (lo, hi) = h.edges(b);
                            let mut row = cell.prefix();
                            row.extend([
                                name.into(),
                                source.into(),
                                b.into(),
                                lo.into(),
                                hi.into(),
                                (*c as usize).into(),
                            ]);
                            hist.push(row);
                        }
                    }
                }
            }
            Err(e) => {
                let mut prefix = cell.prefix();
                prefix.push(Value::Empty);
                push_rows(&mut summary, &mut failures, prefix, &cell.to_string(), Err(e));
            }
        }
    }
    Ok(ExperimentOutput {
        experiment: "prior_comparison",
        tables: vec![summary, hist],
        failures,
    })
}
