//! Subcommand drivers. Every CSV starts with a `stage` column naming the
//! core operation that produced the row.

use std::io::Write;
use std::path::{Path, PathBuf};

use semilab_core::helmholtz::{solve_outgoing, weighted_norm, DiscreteField, SolverConfig};
use semilab_core::measure::{incoming_support_check, liouville_residual, mu_eval, Observable};
use semilab_core::potential_flow::{
    check_absorption_hypothesis, classify_trajectory, estimate_return_set, eval_hamiltonian, fmt17, sample_energy_shell, trajectory,
    PhasePoint,
};
use semilab_core::source::{sigma_quadrature, synthesize_source, tau0, verify_tubular_change_of_variables, ManifoldKind, SpatialBump};
use semilab_core::stats::fit_order;
use semilab_core::wigner::weyl_pairing;
use semilab_core::wkb::{bkw_error, critical_point_and_hessian, WkbConfig};

use crate::config::ExperimentConfig;
use crate::CliError;

pub struct Run {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub seed: u64,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self {
            header: header.iter().map(|s| s.as_ref().to_string()).collect(),
            rows: vec![],
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
        w.write_record(&self.header).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

fn coord_names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn vec_text(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| fmt17(*x)).collect();
    format!("[{}]", parts.join(" "))
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn solve(&self, h: f64) -> Result<DiscreteField, CliError> {
        let cfg = &self.cfg;
        let grid = cfg.grid(h)?;
        let s = synthesize_source(&cfg.source_manifold()?, &cfg.profile()?, h, &grid)?;
        Ok(solve_outgoing(&cfg.potential_pair()?, &cfg.energy(h)?, &s, &grid, &SolverConfig::default_for(h))?)
    }

    /// Shell samples, their trajectories and classifications.
    pub fn flow(&self) -> Result<(), CliError> {
        let cfg = &self.cfg;
        let n = cfg.potential.dimension;
        let pot = cfg.potential_pair()?;
        let sampler = cfg.sampler(cfg.flow.samples, self.seed);
        let pts = sample_energy_shell(&pot, cfg.energy.e0, &sampler)?;
        let steps = (cfg.flow.t_max / cfg.flow.dt).ceil().max(1.0) as usize;
        let times: Vec<f64> = (0..=steps).map(|i| (i as f64 * cfg.flow.dt).min(cfg.flow.t_max)).collect();

        let mut header = vec!["stage".to_string(), "sample".into(), "t".into()];
        header.extend(coord_names("x", n));
        header.extend(coord_names("xi", n));
        header.extend(["energy".into(), "damping".into()]);
        let mut rays = Table::new(&header);
        let mut summary = Table::new(&["stage", "sample", "forward", "backward", "energy_drift"]);
        for (i, w) in pts.iter().enumerate() {
            let tr = trajectory(&pot, w, &times, cfg.tolerances.ray)?;
            for ((t, s), d) in tr.times.iter().zip(&tr.states).zip(&tr.damping) {
                let mut row = vec!["trajectory".into(), i.to_string(), fmt17(*t)];
                row.extend(s.x.iter().chain(&s.xi).map(|v| fmt17(*v)));
                row.extend([fmt17(eval_hamiltonian(&pot, s)), fmt17(*d)]);
                rays.push(row);
            }
            let fwd = classify_trajectory(&pot, w, &sampler.classify)?;
            let bwd = classify_trajectory(&pot, &w.reversed(), &sampler.classify)?;
            summary.push(vec![
                "classify_trajectory".into(),
                i.to_string(),
                format!("{fwd:?}"),
                format!("{bwd:?}"),
                fmt17(tr.max_energy_drift(&pot)),
            ]);
        }
        rays.write(&self.path("flow.csv"))?;
        summary.write(&self.path("flow_summary.csv"))
    }

    pub fn measure(&self) -> Result<(), CliError> {
        let cfg = &self.cfg;
        let setup = cfg.measure_setup()?;
        let quad = setup.quadrature()?;
        let n = cfg.potential.dimension;
        let mut header = vec!["stage".to_string(), "node".into(), "branch".into()];
        header.extend(coord_names("z", n));
        header.extend(coord_names("xi", n));
        header.push("weight".into());
        let mut nodes = Table::new(&header);
        for (j, (p, w)) in quad.nodes.iter().zip(&quad.weights).enumerate() {
            let mut row = vec!["sigma_quadrature".into(), j.to_string(), p.branch.to_string()];
            row.extend(p.z.iter().chain(&p.xi).map(|v| fmt17(*v)));
            row.push(fmt17(*w));
            nodes.push(row);
        }
        nodes.write(&self.path("sigma.csv"))?;

        let mut t = Table::new(&["stage", "observable_id", "value", "tail_bound", "t_max_used", "node_count"]);
        for (i, q) in cfg.observable_list()?.iter().enumerate() {
            let ev = mu_eval(q, &setup, cfg.tolerances.measure)?;
            t.push(vec![
                "mu_eval".into(),
                i.to_string(),
                fmt17(ev.value),
                fmt17(ev.tail_bound),
                fmt17(ev.t_max_used),
                ev.node_count.to_string(),
            ]);
        }
        t.write(&self.path("measure.csv"))
    }

    pub fn solve_all(&self) -> Result<(), CliError> {
        let cfg = &self.cfg;
        let mut summary = Table::new(&["stage", "h", "nodes", "dx", "norm", "weighted_norm", "alpha"]);
        for (k, &h) in cfg.h_list.iter().enumerate() {
            let u = self.solve(h)?;
            let n = u.grid.n;
            let mut header = vec!["stage".to_string()];
            header.extend(coord_names("x", n));
            header.extend(["re".into(), "im".into()]);
            let mut field = Table::new(&header);
            for (i, v) in u.values.iter().enumerate() {
                let mut row = vec!["solve_outgoing".to_string()];
                row.extend(u.grid.point(i).iter().map(|c| fmt17(*c)));
                row.extend([fmt17(v.re), fmt17(v.im)]);
                field.push(row);
            }
            field.write(&self.path(&format!("solve_h{k}.csv")))?;
            let bin = self.path(&format!("solve_h{k}.bin"));
            let file = std::fs::File::create(&bin).map_err(|e| CliError::Io(format!("{}: {e}", bin.display())))?;
            let mut w = std::io::BufWriter::new(file);
            u.write_binary(&mut w)
                .and_then(|_| w.flush())
                .map_err(|e| CliError::Io(format!("{}: {e}", bin.display())))?;
            summary.push(vec![
                "solve_outgoing".into(),
                fmt17(h),
                u.values.len().to_string(),
                fmt17(u.grid.dx),
                fmt17(u.norm()),
                fmt17(weighted_norm(&u, cfg.grid.alpha)),
                fmt17(cfg.grid.alpha),
            ]);
        }
        summary.write(&self.path("solve.csv"))
    }

    fn pairings(&self, qs: &[Observable]) -> Result<Vec<Vec<f64>>, CliError> {
        let mut out = vec![];
        for &h in &self.cfg.h_list {
            if qs.is_empty() {
                out.push(vec![]);
                continue;
            }
            let u = self.solve(h)?;
            out.push(qs.iter().map(|q| weyl_pairing(q, &u)).collect::<Result<Vec<_>, _>>()?);
        }
        Ok(out)
    }

    pub fn pair(&self) -> Result<(), CliError> {
        let qs = self.cfg.observable_list()?;
        let p = self.pairings(&qs)?;
        let mut t = Table::new(&["stage", "observable_id", "h", "pairing"]);
        for (i, _) in qs.iter().enumerate() {
            for (k, &h) in self.cfg.h_list.iter().enumerate() {
                t.push(vec!["weyl_pairing".into(), i.to_string(), fmt17(h), fmt17(p[k][i])]);
            }
        }
        t.write(&self.path("pair.csv"))
    }

    /// Pairing against the measure for every `h`, then the fitted decay
    /// order of the error per observable.
    pub fn converge(&self) -> Result<(), CliError> {
        let cfg = &self.cfg;
        let qs = cfg.observable_list()?;
        let setup = cfg.measure_setup()?;
        let mus = qs
            .iter()
            .map(|q| Ok(mu_eval(q, &setup, cfg.tolerances.measure)?.value))
            .collect::<Result<Vec<f64>, CliError>>()?;
        let p = self.pairings(&qs)?;
        let mut t = Table::new(&["stage", "observable_id", "h", "pairing", "mu", "abs_error", "rel_error"]);
        let mut fits = Table::new(&["stage", "observable_id", "order"]);
        for (i, mu) in mus.iter().enumerate() {
            let mut errs = vec![];
            for (k, &h) in cfg.h_list.iter().enumerate() {
                let err = (p[k][i] - mu).abs();
                errs.push(err);
                t.push(vec![
                    "converge".into(),
                    i.to_string(),
                    fmt17(h),
                    fmt17(p[k][i]),
                    fmt17(*mu),
                    fmt17(err),
                    fmt17(err / mu.abs()),
                ]);
            }
            if cfg.h_list.len() >= 2 {
                fits.push(vec!["fit_order".into(), i.to_string(), fmt17(fit_order(&cfg.h_list, &errs))]);
            }
        }
        t.write(&self.path("converge.csv"))?;
        fits.write(&self.path("converge_fit.csv"))
    }

    fn propagation_time(&self) -> Result<f64, CliError> {
        let cfg = &self.cfg;
        match cfg.wkb.t {
            Some(t) => Ok(t),
            None => Ok(tau0(&cfg.source_manifold()?, &cfg.potential_pair()?, cfg.energy.e0)?),
        }
    }

    pub fn wkb(&self) -> Result<(), CliError> {
        let cfg = &self.cfg;
        let mut errors = Table::new(&["stage", "h", "t", "L2_error", "fitted_order"]);
        if cfg.potential.dimension == 1 {
            let t = self.propagation_time()?;
            let r = bkw_error(&cfg.wkb_setup()?, &cfg.h_list, t)?;
            for (h, e) in r.h.iter().zip(&r.errors) {
                errors.push(vec!["bkw_error".into(), fmt17(*h), fmt17(t), fmt17(*e), fmt17(r.order)]);
            }
        } else {
            eprintln!("wkb: error fits are one-dimensional; writing the Hessian table only");
        }
        errors.write(&self.path("wkb.csv"))?;

        let mut hess = Table::new(&["stage", "t", "t_x", "param", "det_hess", "asymptotic_ratio", "c_estimate"]);
        let source = cfg.source_manifold()?;
        let pot = cfg.potential_pair()?;
        let e0 = cfg.energy.e0;
        let angle = cfg.wkb.hessian_angle;
        let foot = match &source.kind {
            ManifoldKind::Point { z } => Some((z.clone(), if z.len() == 1 { vec![1.0] } else { vec![angle.cos(), angle.sin()] })),
            ManifoldKind::Circle { center, radius, .. } => {
                let dir = vec![angle.cos(), angle.sin()];
                Some((vec![center[0] + radius * dir[0], center[1] + radius * dir[1]], dir))
            }
            _ => None,
        };
        if let Some((z, dir)) = foot {
            let k = (e0 - pot.v1(&z)).max(0.0).sqrt();
            for &t in &cfg.wkb.hessian_times {
                let x: Vec<f64> = z.iter().zip(&dir).map(|(a, d)| a + 2.0 * t * k * d).collect();
                let cp = critical_point_and_hessian(&source, &pot, e0, &x, &WkbConfig::default())?;
                hess.push(vec![
                    "critical_point_and_hessian".into(),
                    fmt17(t),
                    fmt17(cp.t_x),
                    fmt17(cp.param),
                    fmt17(cp.det_hess),
                    fmt17(cp.asymptotic_ratio),
                    fmt17((cp.asymptotic_ratio - 1.0) / cp.t_x),
                ]);
            }
        }
        hess.write(&self.path("hessian.csv"))
    }

    /// Run every applicable check; fails with [`CliError::CheckFailed`]
    /// after writing the report if any check exceeds its tolerance.
    pub fn check(&self) -> Result<(), CliError> {
        let cfg = &self.cfg;
        let c = &cfg.checks;
        let pot = cfg.potential_pair()?;
        let e0 = cfg.energy.e0;
        let source = cfg.source_manifold()?;
        let n = cfg.potential.dimension;
        let mut t = Table::new(&["stage", "check", "value", "tolerance", "pass", "detail"]);
        let mut failed = vec![];
        let mut record = |stage: &str, check: &str, value: f64, tol: f64, detail: String| {
            // Print -0 as 0.
            let value = value + 0.0;
            let pass = value <= tol;
            if !pass {
                failed.push(check.to_string());
            }
            t.push(vec![stage.into(), check.into(), fmt17(value), fmt17(tol), pass.to_string(), detail]);
        };

        let sampler = cfg.sampler(c.absorption_samples, self.seed);
        let rep = check_absorption_hypothesis(&pot, e0, &sampler)?;
        let witness = rep
            .witnesses
            .first()
            .map(|w: &PhasePoint| format!("witness x={} xi={}", vec_text(&w.x), vec_text(&w.xi)))
            .unwrap_or_default();
        record("check_absorption_hypothesis", "absorption", 1.0 - rep.pass_fraction, 0.0, witness);

        let quad = sigma_quadrature(&source, &pot, e0, 0)?;
        let ret = estimate_return_set(&source, &pot, e0, &quad, &sampler)?;
        record("estimate_return_set", "return_set", ret.fraction, c.return_fraction, String::new());

        if let ManifoldKind::Point { z } = &source.kind {
            let t0 = tau0(&source, &pot, e0)?;
            let k = (e0 - pot.v1(z)).sqrt();
            let mut center = z.clone();
            center[0] += t0 * k;
            let bump = SpatialBump::isotropic(center, 0.1 * t0 * k, 1.0);
            let tube = verify_tubular_change_of_variables(&source, &pot, e0, &bump, t0, 0)?;
            record("verify_tubular_change_of_variables", "tube", tube.relerr, c.tube_slope * t0, format!("tau0={}", fmt17(t0)));
        }

        let setup = cfg.measure_setup()?;
        for (i, q) in cfg.observable_list()?.iter().enumerate() {
            let r = liouville_residual(q, &setup, cfg.tolerances.measure)?;
            let rel = r.residual.abs() / r.rhs.abs().max(1.0);
            record("liouville_residual", &format!("liouville[{i}]"), rel, c.liouville_relerr, String::new());
        }

        // Probe bump far out on an incoming ray along the first axis.
        let k = e0.sqrt();
        let mut x = vec![0.0; n];
        let mut xi = vec![0.0; n];
        x[0] = -c.incoming_radius - 1.0;
        xi[0] = k;
        let probe = Observable::new(n).with_bump(&x, &xi, 0.5, 0.2, 1.0)?;
        let inc = incoming_support_check(&probe, &setup, c.incoming_radius, 0.5, cfg.tolerances.measure)?;
        record("incoming_support_check", "incoming", inc, c.incoming_mass, String::new());

        if n == 1 {
            let tt = self.propagation_time()?;
            let r = bkw_error(&cfg.wkb_setup()?, &c.bkw_h_list, tt)?;
            let worst = r.errors.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
            record("bkw_error", "wkb_monotone", worst, 1.0, format!("errors={}", vec_text(&r.errors)));
        }

        t.write(&self.path("checks.csv"))?;
        if failed.is_empty() {
            Ok(())
        } else {
            Err(CliError::CheckFailed(failed.join(", ")))
        }
    }
}
