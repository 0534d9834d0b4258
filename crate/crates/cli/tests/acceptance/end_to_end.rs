use std::path::PathBuf;
use std::time::Instant;

use ssm_core::config::TrainConfig;
use ssm_core::dataset::{Dataset, Split};
use ssm_core::eval::{evaluate, EvalOptions, EvalReport};
use ssm_core::model::WorldMode;
use ssm_core::synth::{generate_dataset, SyntheticSpec};
use ssm_core::trainer::{fit, FitOptions};

use crate::Outcome;

const EPOCHS: usize = 120;
const SEED: u64 = 0;

pub struct Run {
    pub report: EvalReport,
    /// Training wall-clock in seconds.
    pub train_seconds: f64,
    /// Training plus evaluation.
    pub total_seconds: f64,
}

#[derive(Default)]
pub struct Bench {
    data: Option<Dataset>,
    multi: Option<Run>,
    direct: Option<Run>,
}

fn run_dir(label: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(label);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn config_for(ds: &Dataset) -> TrainConfig {
    let mut c = TrainConfig {
        epochs: EPOCHS,
        seed: SEED,
        ..TrainConfig::default()
    };
    c.model.num_classes = ds.num_classes;
    c.model.num_points = ds.num_points;
    c
}

fn train_and_score(ds: &Dataset, config: &TrainConfig, label: &str) -> Run {
    let started = Instant::now();
    let out_dir = run_dir(label);
    eprintln!(
        "acceptance: training {label} ({} epochs, {} samples) in {}",
        config.epochs,
        ds.split(Split::Train).len(),
        out_dir.display()
    );
    let trained = fit(
        &ds.split(Split::Train),
        &ds.split(Split::Val),
        &ds.templates,
        config,
        &FitOptions {
            out_dir,
            resume: false,
            verbose: false,
        },
    )
    .unwrap_or_else(|e| panic!("training {label} failed: {e}"));
    let opts = EvalOptions {
        presence_threshold: config.presence_threshold,
        ..EvalOptions::default()
    };
    let report = evaluate(
        &trained.model,
        trained.params(),
        &ds.split(Split::Test),
        &ds.templates,
        &opts,
    )
    .unwrap_or_else(|e| panic!("evaluating {label} failed: {e}"));
    Run {
        report,
        train_seconds: trained.summary.wall_seconds,
        total_seconds: started.elapsed().as_secs_f64(),
    }
}

impl Bench {
    fn data(&mut self) -> &Dataset {
        self.data
            .get_or_insert_with(|| generate_dataset(&SyntheticSpec::default()).expect("default synthetic dataset"))
    }

    fn multi(&mut self) -> &Run {
        if self.multi.is_none() {
            let ds = self.data().clone();
            self.multi = Some(train_and_score(&ds, &config_for(&ds), "multi"));
        }
        self.multi.as_ref().unwrap()
    }

    fn direct(&mut self) -> &Run {
        if self.direct.is_none() {
            let ds = self.data().clone();
            let mut c = config_for(&ds);
            c.model.world_mode = WorldMode::Direct;
            self.direct = Some(train_and_score(&ds, &c, "direct-world"));
        }
        self.direct.as_ref().unwrap()
    }

    pub fn end_to_end(&mut self) -> Outcome {
        let run = self.multi();
        let a = &run.report.aggregate;
        let r = &run.report;
        let pass = a.center_err < 2.0
            && r.recall == 1.0
            && a.local_rmse < 3.0
            && a.world_rmse < 2.0
            && a.s2s_mean < 2.5
            && run.total_seconds < 7200.0;
        Outcome::new(
            pass,
            format!(
                "test n={} center error {:.3} (<2.0), recall {:.3} (=1 at 0.3), local RMSE {:.3} (<3.0), \
                 world RMSE {:.3} (<2.0), surface mean {:.3} (<2.5), wall-clock {:.0}s (<7200s)",
                a.count, a.center_err, r.recall, a.local_rmse, a.world_rmse, a.s2s_mean, run.total_seconds
            ),
        )
    }

    pub fn direct_ablation(&mut self) -> Outcome {
        let full = self.multi().report.aggregate.world_rmse;
        let direct = self.direct().report.aggregate.world_rmse;
        Outcome::new(
            full < direct,
            format!("world RMSE with alignment {full:.3} vs direct regression {direct:.3}"),
        )
    }

    pub fn single_vs_multi(&mut self) -> Outcome {
        let ds = self.data().clone();
        let (multi_train, multi_report) = {
            let m = self.multi();
            (m.train_seconds, m.report.clone())
        };
        let mut single_train = 0.0;
        let mut local = Vec::new();
        let mut world = Vec::new();
        let mut per_class = Vec::new();
        for k in 0..ds.num_classes {
            let one = ds.single_class(k).expect("single-class view");
            let run = train_and_score(&one, &config_for(&one), &format!("single-{k}"));
            single_train += run.train_seconds;
            let s = &run.report.aggregate;
            let m = &multi_report.per_anatomy[k];
            per_class.push(format!(
                "class {k} local {:.3}/{:.3} world {:.3}/{:.3}",
                s.local_rmse, m.local_rmse, s.world_rmse, m.world_rmse
            ));
            local.push(s.local_rmse);
            world.push(s.world_rmse);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (sl, sw) = (mean(&local), mean(&world));
        let ml = mean(&multi_report.per_anatomy.iter().map(|a| a.local_rmse).collect::<Vec<_>>());
        let mw = mean(&multi_report.per_anatomy.iter().map(|a| a.world_rmse).collect::<Vec<_>>());
        let within = |s: f64, m: f64| (s - m).abs() <= 0.25 * m;
        let pass = within(sl, ml) && within(sw, mw) && multi_train < single_train;
        Outcome::new(
            pass,
            format!(
                "mean local RMSE single {sl:.3} vs multi {ml:.3} ({:+.1}%), mean world RMSE single {sw:.3} vs multi {mw:.3} ({:+.1}%), \
                 training wall-clock multi {multi_train:.0}s vs singles {single_train:.0}s; {}",
                100.0 * (sl - ml) / ml,
                100.0 * (sw - mw) / mw,
                per_class.join("; ")
            ),
        )
    }
}
