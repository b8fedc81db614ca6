//! The named experiments. Each writes its CSV outputs under the run
//! directory and returns the rows and checks of its report.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;

use opwalk_core::annealed::{exact_annealed, field_seed, hitting_profile, AnnealedCache, Estimator, ModelParams};
use opwalk_core::cluster::{compute_backbone, estimate_pc, intersection_time, BackboneField};
use opwalk_core::environment::{sample_environment, EnvironmentWindow};
use opwalk_core::experiments::{
    adjacent_backbone_pair, annealed_joint, build_coupling, classify_good, classify_social, derivative_estimates,
    pair_tv, quenched_joint, scale_ladder, GoodParams, ScaleLadder,
};
use opwalk_core::measures::{
    ann_times_pre, estimate_sigma2, hybrid_limits, hybrid_scales, lclt_error, qlclt_error, slice_variances,
    GaussianReference,
};
use opwalk_core::prefactor::{
    box_concentration, cesaro_prefactor, check_harmonicity, compute_prefactor, invariance_gap, prefactor_moments,
    LocalFunctional, PrefactorSlice,
};
use opwalk_core::stats::{linear_fit, median};
use opwalk_core::walk::{propagate_checkpoints, DistributionSlice};
use opwalk_core::{Boundary, BoxPartition, SpaceTimePoint, SpatialBox};

use crate::config::{Experiment, RunConfig};
use crate::report::{self, Check, DiagnosticReport, Fingerprint, Row};
use crate::CliError;

type Res<T> = Result<T, CliError>;
type PerSeed<T> = Vec<Res<(Fingerprint, Vec<T>)>>;

struct Run<'a> {
    cfg: &'a RunConfig,
    cache: &'a AnnealedCache,
    report: DiagnosticReport,
}

fn fingerprint(env: &EnvironmentWindow) -> Fingerprint {
    Fingerprint {
        seed: env.seed(),
        sites: env.site_count(),
        open_fraction: env.open_fraction(),
        digest: report::digest_bytes(&env.bits().to_bytes()),
    }
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4e}")).collect();
    format!("[{}]", parts.join(", "))
}

impl<'a> Run<'a> {
    fn origin(&self) -> SpaceTimePoint {
        SpaceTimePoint::origin(self.cfg.d)
    }

    fn seed(&self, i: u64) -> u64 {
        field_seed(self.cfg.seed_base, i)
    }

    fn field_tag(&self, i: u64) -> String {
        format!("field={}", self.seed(i))
    }

    fn annealed_tag(&self) -> String {
        format!("annealed_base={};reps={}", self.cfg.seed_base, self.cfg.reps)
    }

    fn pooled_tag(&self) -> String {
        format!("field_base={};seeds={}", self.cfg.seed_base, self.cfg.seeds)
    }

    fn row(&mut self, statistic: &str, n: Option<i64>, seed: String, value: f64, stderr: Option<f64>) {
        self.report.rows.push(Row {
            run_id: self.report.run_id.clone(),
            statistic: statistic.into(),
            n,
            p: self.cfg.p,
            d: self.cfg.d,
            seed,
            value,
            stderr,
        });
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.report.checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    }

    fn create(&mut self, name: &str) -> Res<BufWriter<File>> {
        self.report.outputs.push(name.into());
        Ok(BufWriter::new(File::create(self.cfg.out.join(name))?))
    }

    fn write_slice(&mut self, name: &str, s: &DistributionSlice) -> Res<()> {
        let mut w = self.create(&format!("{name}.csv"))?;
        let d = s.dim();
        let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        header.push("mass".into());
        if s.std_error.is_some() {
            header.push("stderr".into());
        }
        writeln!(w, "{}", header.join(","))?;
        for (x, v) in s.grid.nonzero() {
            let mut cols: Vec<String> = x.iter().map(|c| c.to_string()).collect();
            cols.push(format!("{v:e}"));
            if s.std_error.is_some() {
                cols.push(format!("{:e}", s.std_error_at(&x)));
            }
            writeln!(w, "{}", cols.join(","))?;
        }
        w.flush()?;
        let meta = serde_json::json!({
            "time": s.time,
            "law": s.label.as_str(),
            "provenance": s.provenance.describe(),
            "region": s.grid.region().to_string(),
            "total_mass": s.total_mass(),
        });
        let mut w = self.create(&format!("{name}.meta.json"))?;
        writeln!(w, "{}", serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    fn write_prefactor(&mut self, name: &str, s: &PrefactorSlice) -> Res<()> {
        let mut w = self.create(&format!("{name}.csv"))?;
        s.write_csv(&mut w)?;
        w.flush()?;
        let meta: serde_json::Map<String, serde_json::Value> =
            s.metadata().into_iter().map(|(k, v)| (k.to_string(), v.into())).collect();
        let mut w = self.create(&format!("{name}.meta.json"))?;
        writeln!(w, "{}", serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    fn annealed(&self, params: &ModelParams, checkpoints: &[i64]) -> Res<Vec<DistributionSlice>> {
        self.annealed_with(params, checkpoints, Estimator::Plain)
    }

    fn annealed_with(&self, params: &ModelParams, checkpoints: &[i64], est: Estimator) -> Res<Vec<DistributionSlice>> {
        let (start, reps, seed) = (self.origin(), self.cfg.reps, self.cfg.seed_base);
        Ok(self.cache.get_or_compute_with(params, &start, checkpoints, reps, seed, est)?)
    }

    /// Open window for `n` steps from the origin with `lookback` earlier times.
    fn open_field(&self, params: &ModelParams, n: i64, lookback: i64, i: u64) -> Res<(BackboneField, Fingerprint)> {
        let plan = params.plan(&self.origin(), n, lookback)?;
        let env = plan.sample_env(params, self.seed(i))?;
        let fp = fingerprint(&env);
        Ok((compute_backbone(env, plan.horizon)?, fp))
    }

    /// Periodic window of side `2 half_width + 1` over times `[0, t + margin]`.
    fn periodic_env(&self, t: i64, i: u64) -> Res<(EnvironmentWindow, i64)> {
        let hw = self.cfg.settings.half_width.unwrap_or(200);
        let horizon = t + self.cfg.model().horizon_margin_for(t);
        let env = sample_environment(
            self.cfg.d,
            &vec![hw; self.cfg.d],
            (0, horizon),
            self.cfg.p,
            self.seed(i),
            Boundary::Periodic,
        )?;
        Ok((env, horizon))
    }

    fn periodic_field(&self, t: i64, i: u64) -> Res<(BackboneField, Fingerprint)> {
        let (env, horizon) = self.periodic_env(t, i)?;
        let fp = fingerprint(&env);
        Ok((compute_backbone(env, horizon)?, fp))
    }

    fn window(&self, n: i64, i: u64) -> Res<(BackboneField, Fingerprint)> {
        if self.cfg.periodic {
            self.periodic_field(n, i)
        } else {
            self.open_field(&self.cfg.model(), n, 0, i)
        }
    }

    fn seeds(&self) -> Vec<u64> {
        (0..self.cfg.seeds).collect()
    }
}

/// Run one experiment, writing `report.csv`, `report.json`, `config.toml`
/// and the experiment's own CSVs into `cfg.out`.
pub fn run_experiment(cfg: &RunConfig, cache: &AnnealedCache) -> Res<DiagnosticReport> {
    let started = Instant::now();
    fs::create_dir_all(&cfg.out)?;
    let echo = cfg.echo();
    let hits_before = cache.hits();
    let mut run = Run {
        cfg,
        cache,
        report: DiagnosticReport {
            run_id: report::run_id(&echo),
            experiment: cfg.experiment.name().into(),
            ..Default::default()
        },
    };
    fs::write(cfg.out.join("config.toml"), &echo)?;
    match cfg.experiment {
        Experiment::Gen => gen(&mut run)?,
        Experiment::Backbone => backbone(&mut run)?,
        Experiment::Propagate => propagate(&mut run)?,
        Experiment::Annealed => annealed(&mut run)?,
        Experiment::Prefactor => prefactor(&mut run)?,
        Experiment::Qlclt => qlclt(&mut run)?,
        Experiment::Lclt => lclt(&mut run)?,
        Experiment::Ladder => ladder(&mut run)?,
        Experiment::GoodBoxes => goodboxes(&mut run)?,
        Experiment::SocialBoxes => socialboxes(&mut run)?,
        Experiment::Couple => couple(&mut run)?,
        Experiment::PairTv => pairtv(&mut run)?,
        Experiment::Intersect => intersect(&mut run)?,
        Experiment::Hits => hits(&mut run)?,
        Experiment::Hybrid => hybrid(&mut run)?,
        Experiment::Derivatives => derivatives(&mut run)?,
        Experiment::Invariance => invariance(&mut run)?,
        Experiment::Pc => pc(&mut run)?,
    }
    for c in run.report.checks.clone() {
        let seed = run.pooled_tag();
        run.row(&format!("check:{}", c.name), None, seed, c.passed as u8 as f64, None);
    }
    let mut report = run.report;
    report.cache_hits = cache.hits() - hits_before;
    report::write_rows(File::create(cfg.out.join("report.csv"))?, &report.rows)?;
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    report::write_sidecar(&cfg.out.join("report.json"), &report)?;
    Ok(report)
}

fn gen(run: &mut Run) -> Res<()> {
    let n = run.cfg.n;
    for i in run.seeds() {
        let env = if run.cfg.periodic {
            run.periodic_env(n, i)?.0
        } else {
            let params = run.cfg.model();
            params.plan(&run.origin(), n, 0)?.sample_env(&params, run.seed(i))?
        };
        let mut w = run.create(&format!("env_s{i}.opw"))?;
        env.write_binary(&mut w)?;
        w.flush()?;
        run.report.fingerprints.push(fingerprint(&env));
        let tag = run.field_tag(i);
        run.row("open_fraction", None, tag, env.open_fraction(), None);
    }
    Ok(())
}

fn backbone(run: &mut Run) -> Res<()> {
    for i in run.seeds() {
        let (field, fp) = run.window(run.cfg.n, i)?;
        let mut w = run.create(&format!("backbone_s{i}.opb"))?;
        field.write_binary(&mut w)?;
        w.flush()?;
        let tag = run.field_tag(i);
        run.row("open_fraction", None, tag.clone(), fp.open_fraction, None);
        run.row("backbone_density", Some(0), tag, field.slice_density(0)?, None);
        run.report.fingerprints.push(fp);
    }
    Ok(())
}

fn propagate(run: &mut Run) -> Res<()> {
    let ns = run.cfg.n_list.clone();
    let top = *ns.last().expect("non-empty");
    for i in run.seeds() {
        let (field, fp) = run.window(top, i)?;
        run.report.fingerprints.push(fp);
        let laws = propagate_checkpoints(&field, &run.origin(), &ns)?;
        for law in &laws {
            let n = law.time;
            run.write_slice(&format!("quenched_s{i}_n{n}"), law)?;
            let tag = run.field_tag(i);
            run.row("total_mass", Some(n), tag.clone(), law.total_mass(), None);
            let v = slice_variances(law);
            run.row("variance", Some(n), tag, v.iter().sum::<f64>() / v.len() as f64, None);
        }
    }
    Ok(())
}

fn annealed(run: &mut Run) -> Res<()> {
    let params = run.cfg.model();
    let ns = run.cfg.n_list.clone();
    let exact = run.cfg.settings.mode.as_deref() == Some("exact");
    let laws = if exact {
        ns.iter()
            .map(|&n| exact_annealed(&params, &run.origin(), n))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        run.annealed(&params, &ns)?
    };
    let tag = if exact { "exact".to_string() } else { run.annealed_tag() };
    for law in &laws {
        let n = law.time;
        run.write_slice(&format!("annealed_n{n}"), law)?;
        run.row("total_mass", Some(n), tag.clone(), law.total_mass(), None);
        let v = slice_variances(law);
        run.row("variance", Some(n), tag.clone(), v.iter().sum::<f64>() / v.len() as f64, None);
    }
    Ok(())
}

fn depth_for(run: &Run, n: i64) -> i64 {
    match run.cfg.settings.n_max {
        Some(m) if m > 0 => m,
        _ => n,
    }
}

fn prefactor(run: &mut Run) -> Res<()> {
    let n = run.cfg.n;
    let depth = depth_for(run, n);
    let side = run.cfg.f(run.cfg.settings.m, "m")? as i64;
    let eps = run.cfg.f(run.cfg.settings.eps, "eps")?;
    for i in run.seeds() {
        let (field, fp, t) = if run.cfg.periodic {
            let (f, fp) = run.periodic_field(n, i)?;
            (f, fp, n)
        } else {
            let (f, fp) = run.open_field(&run.cfg.model(), 0, depth, i)?;
            (f, fp, 0)
        };
        run.report.fingerprints.push(fp);
        let psi = compute_prefactor(&field, t, depth, None)?;
        run.write_prefactor(&format!("prefactor_s{i}"), &psi)?;
        let tag = run.field_tag(i);
        run.row("prefactor_mean", Some(depth), tag.clone(), psi.mean(), None);
        let res = check_harmonicity(&field, t, depth, Some(psi.region()))?;
        run.row("harmonicity_residual", Some(depth), tag.clone(), res, None);
        let conc = box_concentration(&psi, side)?;
        run.row("box_exceedance", Some(depth), tag.clone(), conc.exceedance(eps), None);
        for (k, m) in prefactor_moments(&psi, 4).into_iter().enumerate() {
            run.row(&format!("moment_{}", k + 1), Some(depth), tag.clone(), m, None);
        }
    }
    Ok(())
}

fn qlclt(run: &mut Run) -> Res<()> {
    let params = run.cfg.model();
    let ns = run.cfg.n_list.clone();
    let top = *ns.last().expect("non-empty");
    let lookback = ns.iter().map(|&n| depth_for(run, n)).max().unwrap_or(0);
    let annealed = run.annealed(&params, &ns)?;
    let per_seed: PerSeed<(f64, f64)> = run
        .seeds()
        .into_par_iter()
        .map(|i| {
            let (field, fp) = run.open_field(&params, top, lookback, i)?;
            let o = run.origin();
            let quenched = propagate_checkpoints(&field, &o, &ns)?;
            let mut out = Vec::new();
            for ((&n, q), a) in ns.iter().zip(&quenched).zip(&annealed) {
                let psi = cesaro_prefactor(&field, n, depth_for(run, n), Some(&SpatialBox::ball(&o.x, n)))?;
                let err = qlclt_error(q, a, &psi)?;
                let (_, z) = ann_times_pre(a, &psi)?;
                out.push((err, z));
            }
            Ok((fp, out))
        })
        .collect();
    let mut errs = vec![Vec::new(); ns.len()];
    let mut zs = vec![Vec::new(); ns.len()];
    for (i, r) in per_seed.into_iter().enumerate() {
        let (fp, vals) = r?;
        run.report.fingerprints.push(fp);
        let tag = format!("{};{}", run.field_tag(i as u64), run.annealed_tag());
        for (j, (e, z)) in vals.into_iter().enumerate() {
            run.row("qlclt_error", Some(ns[j]), tag.clone(), e, None);
            run.row("z", Some(ns[j]), tag.clone(), z, None);
            errs[j].push(e);
            zs[j].push(z);
        }
    }
    let tag = format!("{};{}", run.pooled_tag(), run.annealed_tag());
    let mut meds = Vec::new();
    for (j, &n) in ns.iter().enumerate() {
        let m = median(&errs[j]);
        meds.push(m);
        run.row("qlclt_error_median", Some(n), tag.clone(), m, None);
        let band = zs[j].iter().filter(|z| (0.9..=1.1).contains(*z)).count() as f64 / zs[j].len() as f64;
        run.row("z_band_fraction", Some(n), tag.clone(), band, None);
        run.row("z_median", Some(n), tag.clone(), median(&zs[j]), None);
    }
    let band = run.report.value("z_band_fraction", Some(top)).unwrap_or(0.0);
    run.check("qlclt_median_decreasing", strictly_decreasing(&meds), fmt_list(&meds));
    run.check("z_band_at_top", band >= 0.8, format!("fraction in [0.9,1.1] at n={top}: {band:.3}"));
    Ok(())
}

fn lclt(run: &mut Run) -> Res<()> {
    let params = run.cfg.model();
    let ns = run.cfg.n_list.clone();
    let est = match run.cfg.settings.cv_depth.unwrap_or(0) {
        0 => Estimator::Plain,
        depth => Estimator::PrefactorControl { depth },
    };
    let laws = run.annealed_with(&params, &ns, est)?;
    let tag = match est {
        Estimator::PrefactorControl { depth } => format!("{};cv_depth={depth}", run.annealed_tag()),
        Estimator::Plain => run.annealed_tag(),
    };
    let sigma2 = match run.cfg.settings.sigma2 {
        Some(s) => s,
        None => {
            let est = estimate_sigma2(&laws)?;
            for (a, v) in est.per_axis.iter().enumerate() {
                run.row(&format!("sigma2_axis{}", a + 1), None, tag.clone(), *v, None);
            }
            run.row("sigma2_anisotropy", None, tag.clone(), est.anisotropy, None);
            est.sigma2
        }
    };
    run.row("sigma2", None, tag.clone(), sigma2, None);
    let mut errs = Vec::new();
    for law in &laws {
        let e = lclt_error(law, &GaussianReference::new(run.cfg.d, sigma2, law.time)?)?;
        run.row("lclt_error", Some(law.time), tag.clone(), e, None);
        errs.push(e);
    }
    run.check("lclt_error_decreasing", strictly_decreasing(&errs), fmt_list(&errs));
    Ok(())
}

fn ladder(run: &mut Run) -> Res<()> {
    let params = run.cfg.model();
    let s = &run.cfg.settings;
    let big_n = s.big_n.unwrap_or(4096);
    let (theta, m) = (run.cfg.f(s.theta, "theta")?, run.cfg.f(s.m, "m")?);
    let (c, alpha) = (run.cfg.f(s.c_big, "c_big")?, run.cfg.f(s.alpha, "alpha")?);
    let ladder = ScaleLadder::new(big_n, theta, m)?;
    let annealed = run.annealed(&params, &ladder.checkpoints)?;
    let results: Vec<Res<(Fingerprint, ScaleLadder)>> = run
        .seeds()
        .into_par_iter()
        .map(|i| {
            let (field, fp) = run.open_field(&params, big_n, 0, i)?;
            Ok((fp, scale_ladder(&field, &run.origin(), &ladder, &annealed)?))
        })
        .collect();
    let mut failing = 0;
    for (i, r) in results.into_iter().enumerate() {
        let (fp, l) = r?;
        run.report.fingerprints.push(fp);
        let mut w = run.create(&format!("ladder_s{i}.csv"))?;
        l.write_csv(&mut w)?;
        w.flush()?;
        let tag = format!("{};{}", run.field_tag(i as u64), run.annealed_tag());
        for (k, lam) in l.lambdas.iter().enumerate() {
            run.row(&format!("lambda_{k}"), Some(l.scales[k]), tag.clone(), *lam, None);
        }
        let v = l.violations(c, alpha).len();
        failing += (v > 0) as usize;
        run.row("ladder_violations", None, tag, v as f64, None);
    }
    let frac = failing as f64 / run.cfg.seeds as f64;
    let tag = format!("{};{}", run.pooled_tag(), run.annealed_tag());
    run.row("ladder_exceedance_fraction", Some(big_n), tag, frac, None);
    run.check(
        "ladder_stable",
        frac <= 0.1,
        format!("{failing}/{} seeds violate lambda_k <= lambda_(k-1) + {c} n_k^-{alpha}", run.cfg.seeds),
    );
    Ok(())
}

fn goodboxes(run: &mut Run) -> Res<()> {
    let params = run.cfg.model();
    let s = &run.cfg.settings;
    let gp = GoodParams {
        theta: run.cfg.f(s.theta, "theta")?,
        eps: run.cfg.f(s.eps, "eps")?,
        c_big: run.cfg.f(s.c_big, "c_big")?,
        c_small: run.cfg.f(s.c_small, "c_small")?,
    };
    let hw = s.half_width.unwrap_or(200);
    let ns = run.cfg.n_list.clone();
    let top = *ns.last().expect("non-empty");
    let sides: Vec<i64> = ns
        .iter()
        .map(|&n| (((n * n) as f64).powf(gp.theta).floor() as i64).max(1))
        .collect();
    let max_side = *sides.iter().max().expect("non-empty");
    let wide = params.clone().with_spatial_margin(params.spatial_margin + hw + max_side);
    let annealed = run.annealed(&params, &ns)?;
    let region = SpatialBox::ball(&vec![0; run.cfg.d], hw);
    let results: Vec<Res<(Fingerprint, Vec<f64>)>> = run
        .seeds()
        .into_par_iter()
        .map(|i| {
            let (field, fp) = run.open_field(&wide, top, 0, i)?;
            let mut fr = Vec::new();
            for ((&n, &side), a) in ns.iter().zip(&sides).zip(&annealed) {
                let part = BoxPartition::cubes(run.cfg.d, side)?;
                fr.push(classify_good(&field, &part, &region, 0, n, &gp, a)?.fraction_true());
            }
            Ok((fp, fr))
        })
        .collect();
    let mut acc = vec![Vec::new(); ns.len()];
    for (i, r) in results.into_iter().enumerate() {
        let (fp, fr) = r?;
        run.report.fingerprints.push(fp);
        let tag = format!("{};{}", run.field_tag(i as u64), run.annealed_tag());
        for (j, v) in fr.into_iter().enumerate() {
            run.row("good_fraction", Some(ns[j]), tag.clone(), v, None);
            acc[j].push(v);
        }
    }
    let meds: Vec<f64> = acc.iter().map(|v| median(v)).collect();
    let tag = format!("{};{}", run.pooled_tag(), run.annealed_tag());
    for (j, &n) in ns.iter().enumerate() {
        run.row("good_fraction_median", Some(n), tag.clone(), meds[j], None);
    }
    run.check("good_fraction_non_decreasing", meds.windows(2).all(|w| w[1] >= w[0]), fmt_list(&meds));
    Ok(())
}

fn socialboxes(run: &mut Run) -> Res<()> {
    let ms = run.cfg.settings.m_list.clone().unwrap_or_else(|| vec![2, 4, 8]);
    let c = run.cfg.f(run.cfg.settings.c_big, "c_big")?;
    let hw = run.cfg.settings.half_width.unwrap_or(3000);
    let m_top = *ms.iter().max().unwrap_or(&1);
    let steps = (c * m_top as f64).ceil() as i64;
    let params = run.cfg.model();
    let wide = params.clone().with_spatial_margin(params.spatial_margin + hw + m_top);
    let region = SpatialBox::ball(&vec![0; run.cfg.d], hw);
    let results: PerSeed<(usize, usize)> = run
        .seeds()
        .into_par_iter()
        .map(|i| {
            let (field, fp) = run.open_field(&wide, steps, 0, i)?;
            let mut out = Vec::new();
            for &m in &ms {
                let cls = classify_social(&field, m, c, &region, 0)?;
                let bad = cls.boxes.iter().filter(|(_, ok)| !ok).count();
                out.push((bad, cls.boxes.len()));
            }
            Ok((fp, out))
        })
        .collect();
    let mut pooled = vec![(0usize, 0usize); ms.len()];
    for (i, r) in results.into_iter().enumerate() {
        let (fp, out) = r?;
        run.report.fingerprints.push(fp);
        let tag = run.field_tag(i as u64);
        for (j, (bad, total)) in out.into_iter().enumerate() {
            run.row("non_social_fraction", Some(ms[j]), tag.clone(), bad as f64 / total as f64, None);
            pooled[j].0 += bad;
            pooled[j].1 += total;
        }
    }
    let tag = run.pooled_tag();
    let mut fr = Vec::new();
    for (j, &m) in ms.iter().enumerate() {
        let (bad, total) = pooled[j];
        let f = bad as f64 / total as f64;
        let se = (f * (1.0 - f) / total as f64).sqrt();
        run.row("non_social_fraction_pooled", Some(m), tag.clone(), f, Some(se));
        run.row("non_social_boxes", Some(m), tag.clone(), bad as f64, None);
        fr.push(f);
    }
    let ok = fr.windows(2).all(|w| w[1] <= w[0]) && fr.first() > fr.last();
    run.check("non_social_decreasing", ok, fmt_list(&fr));
    Ok(())
}

fn couple(run: &mut Run) -> Res<()> {
    let params = run.cfg.model();
    let big_n = run.cfg.settings.big_n.unwrap_or(100);
    let m = run.cfg.f(run.cfg.settings.m, "m")? as i64;
    let o = run.origin();
    let ann = annealed_joint(&params, &o, big_n, m, run.cfg.reps, run.cfg.seed_base)?;
    let results: Vec<Res<_>> = run
        .seeds()
        .into_par_iter()
        .map(|i| {
            let (field, fp) = run.open_field(&params, big_n, 0, i)?;
            let q = quenched_joint(&field, &o, big_n, m)?;
            Ok((fp, build_coupling(&ann, &q, big_n, m)?))
        })
        .collect();
    let (mut worst_res, mut min_theta) = (0.0f64, f64::INFINITY);
    for (i, r) in results.into_iter().enumerate() {
        let (fp, s) = r?;
        run.report.fingerprints.push(fp);
        let tag = format!("{};{}", run.field_tag(i as u64), run.annealed_tag());
        let n = Some(big_n);
        run.row("theta_lambda", n, tag.clone(), s.theta_lambda, None);
        run.row("diagonal_box_mass", n, tag.clone(), s.diagonal_box_mass, None);
        run.row("box_tv", n, tag.clone(), s.box_tv, None);
        run.row("residual_annealed", n, tag.clone(), s.residual_annealed, None);
        run.row("residual_quenched", n, tag, s.residual_quenched, None);
        worst_res = worst_res.max(s.residual_annealed).max(s.residual_quenched);
        min_theta = min_theta.min(s.theta_lambda);
    }
    run.check("marginals_exact", worst_res < 1e-10, format!("max residual {worst_res:.3e}"));
    run.check("theta_positive", min_theta > 0.0, format!("min theta {min_theta:.4e}"));
    Ok(())
}

fn pairtv(run: &mut Run) -> Res<()> {
    let params = run.cfg.model();
    let ns = run.cfg.n_list.clone();
    let top = *ns.last().expect("non-empty");
    let d = run.cfg.d;
    let results: Vec<Res<(Fingerprint, Option<Vec<f64>>)>> = run
        .seeds()
        .into_par_iter()
        .map(|i| {
            let (field, fp) = run.open_field(&params, top + 50, 0, i)?;
            let Some(x) = adjacent_backbone_pair(&field, &vec![0; d], 0, 50)? else {
                return Ok((fp, None));
            };
            let mut y = x.clone();
            y[0] += 1;
            let start = SpaceTimePoint::new(x, 0);
            let tvs = ns.iter().map(|&n| pair_tv(&field, &start, &y, n)).collect::<Result<Vec<_>, _>>()?;
            Ok((fp, Some(tvs)))
        })
        .collect();
    let mut acc = vec![Vec::new(); ns.len()];
    let mut missing = 0;
    for (i, r) in results.into_iter().enumerate() {
        let (fp, tvs) = r?;
        run.report.fingerprints.push(fp);
        let tag = run.field_tag(i as u64);
        match tvs {
            Some(tvs) => {
                for (j, v) in tvs.into_iter().enumerate() {
                    run.row("pair_tv", Some(ns[j]), tag.clone(), v, None);
                    acc[j].push(v);
                }
            }
            None => missing += 1,
        }
    }
    let tag = run.pooled_tag();
    run.row("seeds_without_pair", None, tag.clone(), missing as f64, None);
    if acc[0].is_empty() {
        run.check("pair_tv_decreasing", false, "no adjacent backbone pair found".into());
        return Ok(());
    }
    let meds: Vec<f64> = acc.iter().map(|v| median(v)).collect();
    for (j, &n) in ns.iter().enumerate() {
        run.row("pair_tv_median", Some(n), tag.clone(), meds[j], None);
    }
    let last = *meds.last().expect("non-empty");
    run.check("pair_tv_decreasing", strictly_decreasing(&meds), fmt_list(&meds));
    run.check("pair_tv_small", last < 0.3, format!("median at n={top}: {last:.4}"));
    Ok(())
}

fn intersect(run: &mut Run) -> Res<()> {
    let ms = run.cfg.settings.m_list.clone().unwrap_or_else(|| vec![2, 4, 8]);
    let c = run.cfg.f(run.cfg.settings.c_big, "c_big")?;
    let hw = run.cfg.settings.half_width.unwrap_or(40);
    let m_top = *ms.iter().max().unwrap_or(&1);
    let steps_top = (c * m_top as f64).ceil() as i64;
    let params = run.cfg.model();
    let wide = params.clone().with_spatial_margin(params.spatial_margin + hw + m_top);
    let d = run.cfg.d;
    let results: PerSeed<(u64, u64)> = run
        .seeds()
        .into_par_iter()
        .map(|i| {
            let (field, fp) = run.open_field(&wide, steps_top, 0, i)?;
            let mut out = Vec::new();
            for &m in &ms {
                let steps = (c * m as f64).ceil() as i64;
                let (mut none, mut total) = (0, 0);
                for x0 in -hw..hw {
                    let mut x = vec![0; d];
                    x[0] = x0;
                    let mut y = x.clone();
                    y[0] += m;
                    if field.xi(&x, 0)? && field.xi(&y, 0)? {
                        total += 1;
                        none += intersection_time(&field, &x, &y, 0, steps)?.is_none() as u64;
                    }
                }
                out.push((none, total));
            }
            Ok((fp, out))
        })
        .collect();
    let mut pooled = vec![(0u64, 0u64); ms.len()];
    for r in results {
        let (fp, out) = r?;
        run.report.fingerprints.push(fp);
        for (j, (a, b)) in out.into_iter().enumerate() {
            pooled[j].0 += a;
            pooled[j].1 += b;
        }
    }
    let tag = run.pooled_tag();
    let mut fr = Vec::new();
    for (j, &m) in ms.iter().enumerate() {
        let (none, total) = pooled[j];
        let f = if total == 0 { f64::NAN } else { none as f64 / total as f64 };
        let se = (f * (1.0 - f) / total as f64).sqrt();
        run.row("non_intersection_frequency", Some(m), tag.clone(), f, Some(se));
        run.row("backbone_pairs", Some(m), tag.clone(), total as f64, None);
        fr.push(f);
    }
    let ok = fr.windows(2).all(|w| w[1] <= w[0]) && fr.first() > fr.last();
    run.check("non_intersection_decreasing", ok, fmt_list(&fr));
    Ok(())
}

fn hits(run: &mut Run) -> Res<()> {
    let params = run.cfg.model();
    let ns = run.cfg.n_list.clone();
    let est = hitting_profile(&params, &ns, run.cfg.reps, run.cfg.seed_base)?;
    let tag = format!("hits_base={};reps={}", run.cfg.seed_base, run.cfg.reps);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&n, e) in ns.iter().zip(&est) {
        run.row("avoidance_frequency", Some(n), tag.clone(), e.value, Some(e.std_error));
        let ly = e.value.ln();
        let se = if e.value > 0.0 { Some(e.std_error / e.value) } else { None };
        run.row("log_frequency", Some(n), tag.clone(), ly, se);
        xs.push(n as f64);
        ys.push(ly);
    }
    let fit = linear_fit(&xs, &ys);
    run.row("log_frequency_fit_slope", None, tag.clone(), fit.slope, None);
    run.row("log_frequency_fit_r2", None, tag, fit.r_squared, None);
    let ok = fit.slope.is_finite() && fit.slope < 0.0 && fit.r_squared >= 0.95;
    let zeros = est.iter().filter(|e| e.value == 0.0).count();
    run.check(
        "log_linear_tail",
        ok,
        format!("slope {:.4}, R^2 {:.4}, {zeros} of {} frequencies exactly zero", fit.slope, fit.r_squared, ns.len()),
    );
    Ok(())
}

fn hybrid(run: &mut Run) -> Res<()> {
    let params = run.cfg.model();
    let ns = run.cfg.n_list.clone();
    let (eps, delta) = (run.cfg.f(run.cfg.settings.eps, "eps")?, run.cfg.f(run.cfg.settings.delta, "delta")?);
    let ks: Vec<i64> = ns.iter().map(|&n| Ok(hybrid_scales(n, eps, delta)?.0)).collect::<Res<_>>()?;
    let mut cps: Vec<i64> = ns.iter().zip(&ks).flat_map(|(&n, &k)| [n - k, n]).collect();
    cps.sort_unstable();
    cps.dedup();
    let annealed = run.annealed(&params, &cps)?;
    let at = |t: i64| annealed.iter().find(|a| a.time == t).expect("checkpoint present");
    let top = *ns.last().expect("non-empty");
    let lookback = ns.iter().map(|&n| depth_for(run, n)).max().unwrap_or(0);
    let results: Vec<Res<_>> = run
        .seeds()
        .into_par_iter()
        .map(|i| {
            let (field, fp) = run.open_field(&params, top, lookback, i)?;
            let mut out = Vec::new();
            for (&n, &k) in ns.iter().zip(&ks) {
                let o = run.origin();
                out.push(hybrid_limits(&field, &o, n, eps, delta, depth_for(run, n), at(n - k), at(n), None)?);
            }
            Ok((fp, out))
        })
        .collect();
    let mut acc = vec![vec![Vec::new(); 3]; ns.len()];
    let mut worst_gap = f64::NEG_INFINITY;
    for (i, r) in results.into_iter().enumerate() {
        let (fp, out) = r?;
        run.report.fingerprints.push(fp);
        let tag = format!("{};{}", run.field_tag(i as u64), run.annealed_tag());
        for (j, h) in out.into_iter().enumerate() {
            let n = Some(ns[j]);
            run.row("l1", n, tag.clone(), h.l1, None);
            run.row("l2", n, tag.clone(), h.l2, None);
            run.row("l3", n, tag.clone(), h.l3, None);
            run.row("normalizer_term", n, tag.clone(), h.normalizer_term, None);
            run.row("qlclt_error", n, tag.clone(), h.qlclt, None);
            run.row("degenerate_boxes", n, tag.clone(), h.degenerate_boxes as f64, None);
            worst_gap = worst_gap.max(h.qlclt - h.triangle_bound());
            acc[j][0].push(h.l1);
            acc[j][1].push(h.l2);
            acc[j][2].push(h.l3);
        }
    }
    let tag = format!("{};{}", run.pooled_tag(), run.annealed_tag());
    for c in 0..3 {
        let meds: Vec<f64> = acc.iter().map(|a| median(&a[c])).collect();
        for (j, &n) in ns.iter().enumerate() {
            run.row(&format!("l{}_median", c + 1), Some(n), tag.clone(), meds[j], None);
        }
        run.check(&format!("l{}_decreasing", c + 1), strictly_decreasing(&meds), fmt_list(&meds));
    }
    run.check("triangle_bound", worst_gap <= 1e-9, format!("max qlclt - bound {worst_gap:.3e}"));
    Ok(())
}

fn derivatives(run: &mut Run) -> Res<()> {
    let params = run.cfg.model();
    let eps = run.cfg.f(run.cfg.settings.eps, "eps")?;
    let rows = derivative_estimates(&params, &run.cfg.n_list, run.cfg.reps, run.cfg.seed_base, eps)?;
    let tag = run.annealed_tag();
    let mut by_kind: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
    for r in &rows {
        let name = r.kind.map(|k| k.as_str()).unwrap_or("partition_oscillation");
        let se = r.scaled_stderr.is_finite().then_some(r.scaled_stderr);
        run.row(&format!("{name}_scaled"), Some(r.n), tag.clone(), r.scaled, se);
        run.row(&format!("{name}_raw"), Some(r.n), tag.clone(), r.raw, None);
        if r.kind.is_some() {
            by_kind.entry(name).or_default().push(r.scaled);
        }
    }
    for (name, v) in by_kind {
        let (lo, hi) = v.iter().fold((f64::MAX, 0.0f64), |(a, b), x| (a.min(*x), b.max(*x)));
        run.check(&format!("{name}_bounded"), hi < 3.0 * lo, fmt_list(&v));
    }
    Ok(())
}

fn invariance(run: &mut Run) -> Res<()> {
    let n = run.cfg.n;
    let depths = run.cfg.settings.depth_list.clone().unwrap_or_else(|| vec![4, n]);
    let f = match run.cfg.settings.functional.as_deref() {
        Some("patch") => LocalFunctional::XiPatchDensity {
            radius: run.cfg.settings.patch_radius.unwrap_or(1),
        },
        Some("one") => LocalFunctional::Constant(1.0),
        _ => LocalFunctional::XiAt {
            dx: vec![0; run.cfg.d],
            dt: 0,
        },
    };
    let results: PerSeed<(f64, f64)> = run
        .seeds()
        .into_par_iter()
        .map(|i| {
            let (field, fp) = run.window(n, i)?;
            let mut out = Vec::new();
            for &depth in &depths {
                let e = invariance_gap(&field, &f, n, depth, None)?;
                out.push((e.value, e.std_error));
            }
            Ok((fp, out))
        })
        .collect();
    let mut acc = vec![Vec::new(); depths.len()];
    for (i, r) in results.into_iter().enumerate() {
        let (fp, out) = r?;
        run.report.fingerprints.push(fp);
        let tag = run.field_tag(i as u64);
        for (j, (v, se)) in out.into_iter().enumerate() {
            run.row("invariance_gap", Some(depths[j]), tag.clone(), v, Some(se));
            acc[j].push(v);
        }
    }
    let meds: Vec<f64> = acc.iter().map(|v| median(v)).collect();
    let tag = run.pooled_tag();
    for (j, &depth) in depths.iter().enumerate() {
        run.row("invariance_gap_median", Some(depth), tag.clone(), meds[j], None);
    }
    let ok = meds.len() < 2 || meds.last() < meds.first() || meds.iter().all(|m| *m == 0.0);
    run.check("invariance_gap_shrinks", ok, fmt_list(&meds));
    Ok(())
}

fn pc(run: &mut Run) -> Res<()> {
    let s = &run.cfg.settings;
    let (threshold, iters) = (run.cfg.f(s.threshold, "threshold")?, s.iters.unwrap_or(10));
    let (d, n, reps, seed) = (run.cfg.d, run.cfg.n, run.cfg.reps, run.cfg.seed_base);
    let name = format!("pc-d{d}-n{n}-reps{reps}-seed{seed}-thr{:016x}-it{iters}.txt", threshold.to_bits());
    let cached: Option<PathBuf> = run.cache.dir().map(|dir| dir.join(&name));
    let stored = cached
        .as_ref()
        .and_then(|p| fs::read_to_string(p).ok())
        .and_then(|t| t.trim().parse::<f64>().ok());
    let value = match stored {
        Some(v) => v,
        None => {
            let v = estimate_pc(d, n, reps, seed, threshold, iters)?;
            if let Some(p) = &cached {
                fs::write(p, format!("{v:?}\n"))?;
            }
            v
        }
    };
    let tag = format!("survival_base={seed};reps={reps}");
    let half_width = 0.5f64.powi(iters as i32 + 1);
    run.row("pc_estimate", Some(n), tag, value, Some(half_width));
    Ok(())
}
