//! Seeded experiment protocol: draw demos and a dev sample, rank orderings,
//! evaluate the selected ones on the test split, and persist everything.

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::artifacts::{self, JsonlWriter, Manifest, ScoreRow, SeedManifest};
use super::{estimate_prior, load_dataset, BackendSpec, CriterionChoice, ExperimentConfig, RunnerError, Setting};
use crate::backend::{
    with_cache, with_counter, Backend, CacheStore, DemoSet, Example, HttpBackend, MockLm,
};
use crate::eval::{aggregate_rows, EvalReport, Judged, ReportEntry, RunResult, RunRow};
use crate::label_dist::{LabelDist, LabelSpace};
use crate::optimizer::{
    parallel_map, rank_and_select, sample_orderings, score_orderings, select_example_sets,
    Criterion, OptimizerError, OrderingContext, ScoredDemoSet, ScoredOrdering,
};
use crate::scoring::{predict_direct, predict_pmi, ScoringMethod};

/// Mixed into the base seed to pick the test subset, so it stays fixed across seeds.
const TEST_SUBSET_SALT: u64 = 0x07e5_75e7;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Response cache; defaults to `cache.tsv` inside `out_dir`.
    pub cache_path: Option<PathBuf>,
    /// Stop with [`RunnerError::Interrupted`] after this many evaluation cells.
    pub stop_after_cells: Option<usize>,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            cache_path: None,
            stop_after_cells: None,
        }
    }

    fn cache_path(&self) -> PathBuf {
        self.cache_path
            .clone()
            .unwrap_or_else(|| self.out_dir.join("cache.tsv"))
    }
}

/// A validated config with its data loaded.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub space: LabelSpace,
    pub train: Vec<Example>,
    /// Test examples in use, in file order.
    pub test: Vec<Example>,
    /// Positions of `test` in the test file.
    pub test_indices: Vec<usize>,
    pub test_gold: Vec<usize>,
    /// Prior from `prior` or `prior_file`.
    pub fixed_prior: Option<LabelDist>,
    /// Draw a dev sample even when the criterion does not need one.
    pub force_dev: bool,
}

/// The per-seed draw: demos, dev sample, and the reference prior.
#[derive(Debug, Clone)]
pub struct SeedDraw {
    pub seed: u64,
    pub demo_indices: Vec<usize>,
    pub dev_indices: Vec<usize>,
    pub demos: DemoSet,
    pub dev: Vec<Example>,
    pub dev_texts: Vec<String>,
    pub prior: Option<LabelDist>,
    pub ordering_seed: u64,
}

#[derive(Debug, Clone)]
pub struct RankedSeed {
    pub draw: SeedDraw,
    pub scored: Vec<ScoredOrdering>,
    /// Ascending by score; every sampled ordering for the random baseline.
    pub selected: Vec<ScoredOrdering>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub manifest: Manifest,
    pub report: EvalReport,
    /// Every evaluated ordering, selected or not.
    pub rows: Vec<RunRow>,
}

pub fn build_backend(
    config: &ExperimentConfig,
    space: &LabelSpace,
) -> Result<Box<dyn Backend>, RunnerError> {
    Ok(match &config.backend {
        BackendSpec::Mock(mock) => Box::new(MockLm::new(mock, space, &config.template)?),
        BackendSpec::Http(http) => Box::new(HttpBackend::new(http.clone().with_env_overrides())?),
    })
}

impl Prepared {
    pub fn new(config: ExperimentConfig) -> Result<Self, RunnerError> {
        config.validate()?;
        let space = config.label_space()?;
        let train = load_dataset(&config.train, &space)?.examples;
        if let Some(i) = train.iter().position(|e| e.label.is_none()) {
            return Err(RunnerError::Unlabeled(i));
        }
        let all_test = load_dataset(&config.test, &space)?.examples;
        let test_indices = match config.test_size {
            Some(n) if n < all_test.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ TEST_SUBSET_SALT);
                let mut picked = index::sample(&mut rng, all_test.len(), n).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..all_test.len()).collect(),
        };
        if test_indices.is_empty() {
            return Err(RunnerError::Config("the test split is empty".into()));
        }
        let test: Vec<Example> = test_indices.iter().map(|&i| all_test[i].clone()).collect();
        let test_gold = test
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let label = e.label.as_deref().ok_or(RunnerError::Unlabeled(test_indices[i]))?;
                Ok(space.index_of(label).expect("dataset labels were checked on load"))
            })
            .collect::<Result<Vec<_>, RunnerError>>()?;
        let fixed_prior = match (&config.prior, &config.prior_file) {
            (Some(p), _) => Some(LabelDist::new(space.id(), p.clone())?),
            (None, Some(path)) => Some(estimate_prior(&load_dataset(path, &space)?.examples, &space)?),
            (None, None) => None,
        };
        Ok(Self {
            config,
            space,
            train,
            test,
            test_indices,
            test_gold,
            fixed_prior,
            force_dev: false,
        })
    }

    /// Seed `seed_index` uses base seed + `seed_index`; demos and dev never overlap.
    pub fn draw(&self, seed_index: usize) -> Result<SeedDraw, RunnerError> {
        let config = &self.config;
        let seed = config.seed.wrapping_add(seed_index as u64);
        let n_dev = if config.needs_dev() || self.force_dev { config.dev_size } else { 0 };
        let need = config.k + n_dev;
        if self.train.len() < need {
            return Err(RunnerError::Config(format!(
                "train has {} examples but k + dev_size = {need}",
                self.train.len()
            )));
        }
        // Demos and the ordering seed come first so they do not depend on
        // whether a dev sample is drawn.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let demo_indices = index::sample(&mut rng, self.train.len(), config.k).into_vec();
        let ordering_seed = rng.next_u64();
        let rest: Vec<usize> = (0..self.train.len())
            .filter(|i| !demo_indices.contains(i))
            .collect();
        let dev_indices: Vec<usize> = index::sample(&mut rng, rest.len(), n_dev)
            .into_iter()
            .map(|j| rest[j])
            .collect();
        let demos = DemoSet::new(demo_indices.iter().map(|&i| self.train[i].clone()).collect())?;
        let dev: Vec<Example> = dev_indices.iter().map(|&i| self.train[i].clone()).collect();
        let dev_texts = dev.iter().map(|e| e.text.clone()).collect();
        let prior = match config.setting {
            Setting::Fewshot => None,
            Setting::FewshotU => Some(self.space.uniform()),
            Setting::FewshotUp => match &self.fixed_prior {
                Some(p) => Some(p.clone()),
                None => Some(estimate_prior(&dev, &self.space)?),
            },
        };
        Ok(SeedDraw {
            seed,
            demo_indices,
            dev_indices,
            demos,
            dev,
            dev_texts,
            prior,
            ordering_seed,
        })
    }

    pub fn criterion<'a>(&self, draw: &'a SeedDraw) -> Criterion<'a> {
        match self.config.criterion {
            CriterionChoice::Pdo => match &draw.prior {
                None => Criterion::PdoFewshot,
                Some(prior) => Criterion::PdoPrior {
                    dev: &draw.dev_texts,
                    prior,
                },
            },
            CriterionChoice::LocalE => Criterion::LocalE {
                dev: &draw.dev_texts,
            },
            CriterionChoice::GlobalE => Criterion::GlobalE {
                dev: &draw.dev_texts,
            },
            CriterionChoice::Oracle => Criterion::Oracle { dev: &draw.dev },
            CriterionChoice::Random => Criterion::Random,
        }
    }

    fn context<'a>(&'a self, backend: &'a dyn Backend, demos: &'a DemoSet) -> OrderingContext<'a> {
        OrderingContext {
            backend,
            template: &self.config.template,
            space: &self.space,
            demos,
        }
    }

    /// Samples and scores orderings for one seed, then keeps the best `keep`.
    pub fn rank(&self, backend: &dyn Backend, draw: SeedDraw) -> Result<RankedSeed, RunnerError> {
        let config = &self.config;
        let orderings = sample_orderings(config.k, config.num_orderings, draw.ordering_seed);
        let criterion = self.criterion(&draw);
        let ctx = self.context(backend, &draw.demos);
        let scored = score_orderings(&ctx, &criterion, &orderings, config.max_in_flight)?;
        let selected = if config.criterion == CriterionChoice::Random {
            scored.clone()
        } else {
            rank_and_select(&scored, config.keep)?
        };
        Ok(RankedSeed {
            draw,
            scored,
            selected,
        })
    }

    /// Predicts every test example under one ordering.
    pub fn evaluate(
        &self,
        backend: &dyn Backend,
        draw: &SeedDraw,
        scored: &ScoredOrdering,
    ) -> Result<RunResult, RunnerError> {
        let config = &self.config;
        let ctx = self.context(backend, &draw.demos);
        let ordering = &scored.ordering;
        let null = match config.scoring {
            ScoringMethod::Direct => None,
            ScoringMethod::Pmi => Some(ctx.distribution(ordering, None)?),
        };
        let predictions = parallel_map(self.test.len(), config.max_in_flight, |i| {
            let dist = ctx.distribution(ordering, Some(&self.test[i].text))?;
            let prediction = match &null {
                None => predict_direct(&dist),
                Some(null) => predict_pmi(&dist, null, config.log_base)?,
            };
            Ok::<_, OptimizerError>(Judged {
                prediction,
                gold: self.test_gold[i],
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        Ok(RunResult {
            predictions,
            ordering: ordering.clone(),
            seed: draw.seed,
            criterion: scored.criterion,
            scoring: config.scoring,
        })
    }

    fn cells_per_seed(&self) -> usize {
        let sampled = crate::optimizer::factorial(self.config.k).min(self.config.num_orderings);
        if self.config.evaluate_all || self.config.criterion == CriterionChoice::Random {
            sampled
        } else {
            self.config.keep
        }
    }
}

/// Ranks orderings for one seed without touching the test split.
pub fn rank_orderings(
    prepared: &Prepared,
    backend: &dyn Backend,
    seed_index: usize,
) -> Result<RankedSeed, RunnerError> {
    prepared.rank(backend, prepared.draw(seed_index)?)
}

/// Example-set search: the pool is the train split minus the seed's dev sample.
pub fn select_examples(
    prepared: &Prepared,
    backend: &dyn Backend,
    seed_index: usize,
) -> Result<(Vec<usize>, Vec<ScoredDemoSet>), RunnerError> {
    let config = &prepared.config;
    let draw = prepared.draw(seed_index)?;
    let pool_indices: Vec<usize> = (0..prepared.train.len())
        .filter(|i| !draw.dev_indices.contains(i))
        .collect();
    let pool: Vec<Example> = pool_indices.iter().map(|&i| prepared.train[i].clone()).collect();
    let criterion = prepared.criterion(&draw);
    let sets = select_example_sets(
        backend,
        &config.template,
        &prepared.space,
        &pool,
        config.k,
        config.num_sets,
        config.keep_sets,
        &criterion,
        draw.ordering_seed,
        config.max_in_flight,
    )?;
    Ok((pool_indices, sets))
}

/// Builds the configured backend and runs [`run_experiment_with_backend`].
pub fn run_experiment(
    config: ExperimentConfig,
    options: &RunOptions,
) -> Result<ExperimentOutcome, RunnerError> {
    let prepared = Prepared::new(config)?;
    let backend = build_backend(&prepared.config, &prepared.space)?;
    run_prepared(&prepared, &*backend, options)
}

/// Runs every seed against `backend`, which is wrapped in the response cache.
pub fn run_experiment_with_backend(
    config: ExperimentConfig,
    backend: &dyn Backend,
    options: &RunOptions,
) -> Result<ExperimentOutcome, RunnerError> {
    let prepared = Prepared::new(config)?;
    run_prepared(&prepared, backend, options)
}

fn run_prepared(
    prepared: &Prepared,
    backend: &dyn Backend,
    options: &RunOptions,
) -> Result<ExperimentOutcome, RunnerError> {
    let config = &prepared.config;
    let dir = &options.out_dir;
    fs::create_dir_all(dir).map_err(|e| RunnerError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let store = Arc::new(CacheStore::open(options.cache_path())?);
    let real = with_counter(backend);
    let real_calls = real.counter();
    let cached = with_cache(real, store);
    let queries = with_counter(&cached);
    let query_count = queries.counter();

    let mut runs_out = JsonlWriter::create(dir.join(artifacts::RUNS_FILE))?;
    let mut scores_out = JsonlWriter::create(dir.join(artifacts::SCORES_FILE))?;
    let total_cells = config.n_seeds * prepared.cells_per_seed();
    let mut manifest = Manifest {
        dataset: config.dataset_label(),
        method: config.method_label(),
        scoring: config.scoring,
        config_hash: config.hash(),
        backend: backend.identity(),
        complete: false,
        completed_cells: 0,
        total_cells,
        backend_calls: 0,
        test_indices: prepared.test_indices.clone(),
        seeds: Vec::with_capacity(config.n_seeds),
        summary: None,
        config: config.clone(),
    };
    let mut rows = Vec::new();

    for seed_index in 0..config.n_seeds {
        let before = query_count.get();
        let ranked = prepared.rank(&queries, prepared.draw(seed_index)?)?;
        let ranking_queries = query_count.get() - before;
        let draw = &ranked.draw;
        for s in &ranked.scored {
            let rank = ranked
                .selected
                .iter()
                .position(|x| x.sample_index == s.sample_index);
            scores_out.append(&ScoreRow {
                seed: draw.seed,
                sample_index: s.sample_index,
                ordering: s.ordering.clone(),
                criterion: s.criterion,
                score: s.score,
                rank,
            })?;
        }
        manifest.seeds.push(SeedManifest {
            seed: draw.seed,
            demo_indices: draw.demo_indices.clone(),
            dev_indices: draw.dev_indices.clone(),
            ordering_seed: draw.ordering_seed,
            prior: draw.prior.as_ref().map(|p| p.probs().to_vec()),
            ranking_queries,
            evaluation_queries: 0,
        });

        let to_evaluate: Vec<(&ScoredOrdering, bool)> = if config.evaluate_all {
            ranked
                .scored
                .iter()
                .map(|s| {
                    let selected = ranked.selected.iter().any(|x| x.sample_index == s.sample_index);
                    (s, selected)
                })
                .collect()
        } else {
            ranked.selected.iter().map(|s| (s, true)).collect()
        };
        let before = query_count.get();
        for (scored, selected) in to_evaluate {
            if options.stop_after_cells == Some(manifest.completed_cells) {
                return interrupt(dir, manifest, query_count.get() - before, real_calls.get());
            }
            let run = prepared.evaluate(&queries, draw, scored)?;
            let row = RunRow::from_run(&run, scored.score, selected, config.ece_bins)?;
            runs_out.append(&row)?;
            rows.push(row);
            manifest.completed_cells += 1;
        }
        manifest.seeds.last_mut().expect("seed pushed").evaluation_queries = query_count.get() - before;
    }

    let report = aggregate_rows(rows.iter().filter(|r| r.selected).cloned().collect())?;
    manifest.complete = true;
    manifest.backend_calls = real_calls.get();
    manifest.summary = Some(artifacts::summary_of(&report));
    artifacts::write_manifest(dir, &manifest)?;
    let entry = ReportEntry {
        dataset: manifest.dataset.clone(),
        method: manifest.method.clone(),
        report: report.clone(),
    };
    artifacts::write_reports(dir, &[(config.scoring, entry)])?;
    Ok(ExperimentOutcome {
        manifest,
        report,
        rows,
    })
}

fn interrupt(
    dir: &std::path::Path,
    mut manifest: Manifest,
    evaluation_queries: u64,
    backend_calls: u64,
) -> Result<ExperimentOutcome, RunnerError> {
    if let Some(last) = manifest.seeds.last_mut() {
        last.evaluation_queries = evaluation_queries;
    }
    manifest.backend_calls = backend_calls;
    let completed_cells = manifest.completed_cells;
    artifacts::write_manifest(dir, &manifest)?;
    Err(RunnerError::Interrupted { completed_cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockConfig;
    use std::collections::BTreeMap;

    fn write_data(dir: &std::path::Path) {
        let mut train = String::new();
        for i in 0..40 {
            let label = if i % 3 == 0 { "negative" } else { "positive" };
            let word = if label == "positive" { "great" } else { "awful" };
            train.push_str(&format!("{{\"text\": \"{word} film number {i}\", \"label\": \"{label}\"}}\n"));
        }
        fs::write(dir.join("train.jsonl"), train).unwrap();
        let mut test = String::new();
        for i in 0..30 {
            let (label, word) = if i % 2 == 0 { ("positive", "great") } else { ("negative", "awful") };
            test.push_str(&format!("{{\"text\": \"{word} show {i}\", \"label\": \"{label}\"}}\n"));
        }
        fs::write(dir.join("test.jsonl"), test).unwrap();
    }

    fn config(dir: &std::path::Path) -> ExperimentConfig {
        let mut keywords = BTreeMap::new();
        keywords.insert("positive".to_string(), vec!["great".to_string()]);
        keywords.insert("negative".to_string(), vec!["awful".to_string()]);
        let mut c = ExperimentConfig::from_toml(
            r#"
train = "train.jsonl"
test = "test.jsonl"
setting = "fewshot-u"
criterion = "pdo"
k = 4
num_orderings = 10
keep = 3
n_seeds = 2
dev_size = 6

[[labels]]
id = "positive"
verbalizer = "positive"

[[labels]]
id = "negative"
verbalizer = "negative"
"#,
        )
        .unwrap();
        c.train = dir.join("train.jsonl");
        c.test = dir.join("test.jsonl");
        c.backend = BackendSpec::Mock(MockConfig {
            keywords,
            ..MockConfig::default()
        });
        c
    }

    #[test]
    fn draws_are_disjoint_and_seeded() {
        let tmp = tempfile::tempdir().unwrap();
        write_data(tmp.path());
        let p = Prepared::new(config(tmp.path())).unwrap();
        let a = p.draw(0).unwrap();
        let b = p.draw(0).unwrap();
        assert_eq!(a.demo_indices, b.demo_indices);
        assert_eq!(a.dev_indices, b.dev_indices);
        assert!(a.demo_indices.iter().all(|i| !a.dev_indices.contains(i)));
        assert_eq!(a.dev_indices.len(), 6);
        assert_ne!(p.draw(1).unwrap().demo_indices, a.demo_indices);
        assert_eq!(a.prior.unwrap().probs(), &[0.5, 0.5]);
    }

    #[test]
    fn fewshot_draws_no_dev() {
        let tmp = tempfile::tempdir().unwrap();
        write_data(tmp.path());
        let mut c = config(tmp.path());
        c.setting = Setting::Fewshot;
        let p = Prepared::new(c).unwrap();
        let d = p.draw(0).unwrap();
        assert!(d.dev_indices.is_empty());
        let with_dev = Prepared::new(config(tmp.path())).unwrap().draw(0).unwrap();
        assert_eq!(with_dev.demo_indices, d.demo_indices);
        assert_eq!(with_dev.ordering_seed, d.ordering_seed);
        assert!(matches!(p.criterion(&d), Criterion::PdoFewshot));
    }

    #[test]
    fn full_run_writes_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        write_data(tmp.path());
        let out = tmp.path().join("out");
        let outcome = run_experiment(config(tmp.path()), &RunOptions::new(&out)).unwrap();
        assert_eq!(outcome.rows.len(), 6);
        assert_eq!(outcome.report.n_runs, 6);
        assert!(outcome.manifest.complete);
        for f in ["runs.jsonl", "scores.jsonl", "manifest.json", "report.md", "report.csv"] {
            assert!(out.join(f).exists(), "{f}");
        }
        let scores = fs::read_to_string(out.join("scores.jsonl")).unwrap();
        assert_eq!(scores.lines().count(), 20);
        let (_, entry) = artifacts::load_report_entry(&out).unwrap();
        assert_eq!(entry.report.accuracy_mean, outcome.report.accuracy_mean);
        // Ranking one seed: 10 orderings x 6 dev texts.
        assert_eq!(outcome.manifest.seeds[0].ranking_queries, 60);
        assert_eq!(outcome.manifest.seeds[0].evaluation_queries, 90);
    }

    #[test]
    fn random_baseline_evaluates_every_sample() {
        let tmp = tempfile::tempdir().unwrap();
        write_data(tmp.path());
        let mut c = config(tmp.path());
        c.setting = Setting::Fewshot;
        c.criterion = CriterionChoice::Random;
        let outcome = run_experiment(c, &RunOptions::new(tmp.path().join("out"))).unwrap();
        assert_eq!(outcome.rows.len(), 20);
        assert_eq!(outcome.manifest.seeds[0].ranking_queries, 0);
    }

    #[test]
    fn interruption_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        write_data(tmp.path());
        let out = tmp.path().join("out");
        let opts = RunOptions {
            stop_after_cells: Some(2),
            ..RunOptions::new(&out)
        };
        match run_experiment(config(tmp.path()), &opts) {
            Err(RunnerError::Interrupted { completed_cells }) => assert_eq!(completed_cells, 2),
            other => panic!("unexpected {other:?}"),
        }
        let runs = fs::read_to_string(out.join("runs.jsonl")).unwrap();
        assert_eq!(runs.lines().count(), 2);
        assert!(artifacts::load_report_entry(&out).is_err());
    }

    #[test]
    fn pmi_issues_one_null_query_per_cell() {
        let tmp = tempfile::tempdir().unwrap();
        write_data(tmp.path());
        let mut c = config(tmp.path());
        c.scoring = ScoringMethod::Pmi;
        c.n_seeds = 1;
        let outcome = run_experiment(c, &RunOptions::new(tmp.path().join("out"))).unwrap();
        assert_eq!(outcome.manifest.seeds[0].evaluation_queries, 3 * 31);
    }

    #[test]
    fn test_subset_is_stable() {
        let tmp = tempfile::tempdir().unwrap();
        write_data(tmp.path());
        let mut c = config(tmp.path());
        c.test_size = Some(7);
        let a = Prepared::new(c.clone()).unwrap();
        let b = Prepared::new(c).unwrap();
        assert_eq!(a.test_indices, b.test_indices);
        assert_eq!(a.test.len(), 7);
        assert!(a.test_indices.windows(2).all(|w| w[0] < w[1]));
    }
}
