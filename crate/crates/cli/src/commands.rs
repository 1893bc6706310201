//! The five subcommands. All file outputs go through a temp file and an
//! atomic rename so an interrupted run never leaves truncated artifacts.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use dgsagnn_core::autodiff::{Checkpoint, RngSnapshot, Tensor};
use dgsagnn_core::data::{leave_one_out_split, parse_movielens_full, SplitDataset};
use dgsagnn_core::eval::evaluate_with;
use dgsagnn_core::graph::{rebuild_all, SimilarityGraph, DEFAULT_K};
use dgsagnn_core::lightgcn::{LightGcn, DEFAULT_LIGHTGCN_DIM, DEFAULT_LIGHTGCN_LAYERS};
use dgsagnn_core::model::{ModelDims, ModelParams};
use dgsagnn_core::sub_seed;
use dgsagnn_core::train::{train_model, BprModel, GraphRecommender, TrainReport};

use crate::config::{Method, RunConfig, Similarity};
use crate::CliError;

// ---- shared plumbing ----

fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let write = || {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(contents.as_bytes())?;
        tmp.persist(path).map_err(|e| e.error)?;
        Ok::<_, std::io::Error>(())
    };
    write().map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn load_dataset(config: &RunConfig) -> Result<SplitDataset, CliError> {
    let (matrix, _) = parse_movielens_full(&config.data_path)?;
    if matrix.num_users == 0 {
        return Err(CliError::Usage(format!(
            "{} holds no interactions",
            config.data_path.display()
        )));
    }
    Ok(leave_one_out_split(&matrix, config.seed))
}

fn model_dims(config: &RunConfig, num_users: usize, num_items: usize) -> ModelDims {
    let mut dims = ModelDims::new(num_users, num_items);
    dims.layer_attention = config.layer_attention;
    // Small catalogs cannot fill the published refinement budget.
    dims.top_refine = dims.top_refine.min(num_items);
    dims
}

fn method_tag(method: Method) -> &'static str {
    match method {
        Method::Dgsagnn => "dgsagnn",
        Method::Lightgcn => "lightgcn",
    }
}

/// Train per the config and return the report plus the named arrays that
/// go into the checkpoint.
fn run_training(
    config: &RunConfig,
    split: &SplitDataset,
) -> Result<(TrainReport, BTreeMap<String, Tensor>), CliError> {
    let tc = config.to_train_config();
    match config.method {
        Method::Dgsagnn => {
            let dims = model_dims(config, split.train.num_users, split.train.num_items);
            let params = ModelParams::init(dims, config.similarity.views(), config.seed);
            let mut model = GraphRecommender::new(
                params,
                split.train.clone(),
                config.rebuild_source.to_core(),
            );
            let report = train_model(&mut model, split, &tc)?;
            Ok((report, model.params.to_arrays()))
        }
        Method::Lightgcn => {
            let mut model =
                LightGcn::new(&split.train, DEFAULT_LIGHTGCN_DIM, DEFAULT_LIGHTGCN_LAYERS, tc.seed)
                    .with_hard_negatives(config.baseline_hard_negatives);
            let report = train_model(&mut model, split, &tc)?;
            let arrays = BTreeMap::from([("emb".to_string(), model.emb.clone())]);
            Ok((report, arrays))
        }
    }
}

fn write_run_artifacts(
    config: &RunConfig,
    report: &TrainReport,
    arrays: BTreeMap<String, Tensor>,
) -> Result<(), CliError> {
    let dir = &config.out_dir;
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    write_atomic(&dir.join("epochs.csv"), &report.epochs_csv())?;
    let tc = config.to_train_config();
    write_atomic(
        &dir.join("metrics.json"),
        &format!("{}\n", report.report_json(&tc, method_tag(config.method))),
    )?;
    write_atomic(&dir.join("config.json"), &config.to_json())?;
    let checkpoint = Checkpoint {
        seed: config.seed,
        epoch: report.best_epoch.or_else(|| report.last().map(|r| r.epoch)).unwrap_or(0),
        rng: RngSnapshot::capture(&sampler_rng(config.seed)),
        arrays,
    };
    let ckpt_path = dir.join("checkpoint.bin");
    checkpoint
        .save(&ckpt_path)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", ckpt_path.display())))?;
    Ok(())
}

fn sampler_rng(seed: u64) -> ChaCha8Rng {
    use rand_chacha::rand_core::SeedableRng;
    ChaCha8Rng::seed_from_u64(sub_seed(seed, "sampling"))
}

fn summarize(report: &TrainReport) {
    match (report.last(), report.best()) {
        (Some(last), Some(best)) => {
            println!(
                "final  epoch {:>2}: recall@20 {:.4}, ndcg@20 {:.4}, loss {:.4}",
                last.epoch, last.recall, last.ndcg, last.loss
            );
            println!(
                "best   epoch {:>2}: recall@20 {:.4}, ndcg@20 {:.4}",
                best.epoch, best.recall, best.ndcg
            );
        }
        _ => println!("no epochs run"),
    }
}

// ---- prepare ----

pub fn prepare(data: &Path, out: &Path) -> Result<(), CliError> {
    let (matrix, idmaps) = parse_movielens_full(data)?;
    println!(
        "{} users, {} items, {} interactions",
        matrix.num_users,
        matrix.num_items,
        matrix.interaction_count()
    );
    println!("sparsity: {:.1}%", matrix.sparsity() * 100.0);
    if matrix.interaction_count() == 0 {
        eprintln!("warning: no interactions parsed from {}", data.display());
    }
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out.display())))?;
    let sidecar = out.join("idmap.tsv");
    write_atomic(&sidecar, &idmaps.to_tsv())?;
    println!("wrote {}", sidecar.display());
    Ok(())
}

// ---- train ----

pub fn train(config: &RunConfig) -> Result<(), CliError> {
    let split = load_dataset(config)?;
    let (report, arrays) = run_training(config, &split)?;
    write_run_artifacts(config, &report, arrays)?;
    summarize(&report);
    println!("artifacts in {}", config.out_dir.display());
    Ok(())
}

// ---- eval ----

pub fn eval(
    config: &RunConfig,
    checkpoint: &Path,
    k: usize,
    exclude_train: bool,
) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint).map_err(|e| {
        CliError::Usage(format!("cannot load checkpoint {}: {e}", checkpoint.display()))
    })?;
    let mut config = config.clone();
    // The checkpoint's seed fixes the split; evaluating against any other
    // split would score a model on items it trained on.
    config.seed = ckpt.seed;
    let split = load_dataset(&config)?;
    let (users, items) = match config.method {
        Method::Dgsagnn => {
            let dims = model_dims(&config, split.train.num_users, split.train.num_items);
            let mut params = ModelParams::init(dims, config.similarity.views(), ckpt.seed);
            params.load_arrays(&ckpt.arrays)?;
            let mut model = GraphRecommender::new(
                params,
                split.train.clone(),
                config.rebuild_source.to_core(),
            );
            model.rebuild(ckpt.epoch)?;
            model.forward_eval()?
        }
        Method::Lightgcn => {
            let mut model = LightGcn::new(
                &split.train,
                DEFAULT_LIGHTGCN_DIM,
                DEFAULT_LIGHTGCN_LAYERS,
                ckpt.seed,
            );
            let emb = ckpt.arrays.get("emb").ok_or_else(|| {
                CliError::Usage("checkpoint has no \"emb\" array; not a lightgcn run?".into())
            })?;
            if emb.shape() != model.emb.shape() {
                return Err(CliError::Usage(format!(
                    "checkpoint emb shape {:?} does not fit this dataset (expected {:?})",
                    emb.shape(),
                    model.emb.shape()
                )));
            }
            model.emb = emb.clone();
            model.forward_eval()?
        }
    };
    let report = evaluate_with(&users, &items, &split, k, exclude_train)?;
    println!("{}", report.metrics_json(ckpt.seed));
    Ok(())
}

// ---- compare ----

/// One row of the comparison: the baseline, or the graph model over a
/// chosen similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunSpec {
    Lightgcn,
    Dgsagnn(Similarity),
}

impl RunSpec {
    /// Table III's five rows: the four single-similarity graph models plus
    /// the baseline.
    pub fn default_set() -> Vec<RunSpec> {
        vec![
            RunSpec::Dgsagnn(Similarity::Cosine),
            RunSpec::Dgsagnn(Similarity::Jaccard),
            RunSpec::Dgsagnn(Similarity::Dpcc),
            RunSpec::Dgsagnn(Similarity::Ipij),
            RunSpec::Lightgcn,
        ]
    }

    fn label(self) -> String {
        match self {
            RunSpec::Lightgcn => "lightgcn".into(),
            RunSpec::Dgsagnn(sim) => format!("dgsagnn({sim})"),
        }
    }

    fn slug(self) -> String {
        match self {
            RunSpec::Lightgcn => "lightgcn".into(),
            RunSpec::Dgsagnn(sim) => format!("dgsagnn-{sim}"),
        }
    }
}

impl FromStr for RunSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "lightgcn" {
            return Ok(RunSpec::Lightgcn);
        }
        if let Some(sim) = s.strip_prefix("dgsagnn:") {
            return Ok(RunSpec::Dgsagnn(sim.parse()?));
        }
        Err(format!("expected \"lightgcn\" or \"dgsagnn:<similarity>\", got {s:?}"))
    }
}

impl fmt::Display for RunSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunSpec::Lightgcn => f.write_str("lightgcn"),
            RunSpec::Dgsagnn(sim) => write!(f, "dgsagnn:{sim}"),
        }
    }
}

struct Row {
    label: String,
    recall: f64,
    ndcg: f64,
}

fn comparison_csv(rows: &[Row]) -> String {
    let mut out = String::from("method,recall_at_20,ndcg_at_20\n");
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.label, row.recall, row.ndcg));
    }
    out
}

fn comparison_markdown(rows: &[Row]) -> String {
    let mut out = String::from("| method | recall@20 | ndcg@20 |\n|---|---|---|\n");
    for row in rows {
        out.push_str(&format!("| {} | {:.4} | {:.4} |\n", row.label, row.recall, row.ndcg));
    }
    out
}

fn best_row(label: String, report: &TrainReport) -> Result<Row, CliError> {
    let record = report
        .best()
        .or_else(|| report.last())
        .ok_or_else(|| CliError::Usage(format!("{label}: run recorded no epochs")))?;
    Ok(Row { label, recall: record.recall, ndcg: record.ndcg })
}

fn loaded_row(dir: &Path) -> Result<Row, CliError> {
    let path = dir.join("metrics.json");
    let missing = |detail: String| CliError::Usage(format!("missing run artifacts: {detail}"));
    let contents = std::fs::read_to_string(&path)
        .map_err(|e| missing(format!("{}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&contents)
        .map_err(|e| missing(format!("{}: {e}", path.display())))?;
    let record = [&v["best"], &v["final"]]
        .into_iter()
        .find(|r| !r.is_null())
        .ok_or_else(|| missing(format!("{}: run recorded no epochs", path.display())))?;
    let metric = |key: &str| {
        record[key]
            .as_f64()
            .ok_or_else(|| missing(format!("{}: no numeric {key}", path.display())))
    };
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned());
    let method = v["method"].as_str().unwrap_or("unknown");
    Ok(Row {
        label: match name {
            Some(name) if name != method => format!("{method} ({name})"),
            _ => method.to_string(),
        },
        recall: metric("recall")?,
        ndcg: metric("ndcg")?,
    })
}

pub fn compare(config: &RunConfig, runs: &[RunSpec], load: &[PathBuf]) -> Result<(), CliError> {
    let mut rows = Vec::new();
    if load.is_empty() {
        let split = load_dataset(config)?;
        for &spec in runs {
            let mut run = config.clone();
            run.out_dir = config.out_dir.join(spec.slug());
            match spec {
                RunSpec::Lightgcn => run.method = Method::Lightgcn,
                RunSpec::Dgsagnn(sim) => {
                    run.method = Method::Dgsagnn;
                    run.similarity = sim;
                }
            }
            // One shared split: the same matrix and seed for every method,
            // so table differences are model differences.
            let (report, arrays) = run_training(&run, &split)?;
            write_run_artifacts(&run, &report, arrays)?;
            rows.push(best_row(spec.label(), &report)?);
        }
    } else {
        for dir in load {
            rows.push(loaded_row(dir)?);
        }
    }
    rows.sort_by(|a, b| b.recall.total_cmp(&a.recall));

    std::fs::create_dir_all(&config.out_dir).map_err(|e| {
        CliError::Usage(format!("cannot create {}: {e}", config.out_dir.display()))
    })?;
    let csv_path = config.out_dir.join("comparison.csv");
    write_atomic(&csv_path, &comparison_csv(&rows))?;
    print!("{}", comparison_markdown(&rows));
    println!();
    println!("wrote {}", csv_path.display());
    Ok(())
}

// ---- graph-inspect ----

/// Shannon entropy of an edge weight distribution, in nats. Bounded by
/// ln(degree); equality at uniform weights.
fn weight_entropy(edges: &[(u32, f64)]) -> f64 {
    -edges.iter().map(|&(_, w)| if w > 0.0 { w * w.ln() } else { 0.0 }).sum::<f64>()
}

/// Mean over users of the Jaccard overlap between neighbor sets. Two empty
/// neighborhoods count as identical.
fn neighbor_overlap(a: &SimilarityGraph, b: &SimilarityGraph) -> f64 {
    let n = a.neighbors.len();
    let per_user = (0..n).map(|u| {
        let sa: std::collections::HashSet<u32> =
            a.neighbors[u].iter().map(|&(v, _)| v).collect();
        let sb: std::collections::HashSet<u32> =
            b.neighbors[u].iter().map(|&(v, _)| v).collect();
        if sa.is_empty() && sb.is_empty() {
            return 1.0;
        }
        let inter = sa.intersection(&sb).count();
        inter as f64 / (sa.len() + sb.len() - inter) as f64
    });
    per_user.sum::<f64>() / n as f64
}

fn entropy_histogram(graph: &SimilarityGraph, max_entropy: f64, bins: usize) -> Vec<usize> {
    let mut hist = vec![0usize; bins];
    for edges in &graph.neighbors {
        let h = weight_entropy(edges);
        let bin = if max_entropy > 0.0 {
            (((h / max_entropy) * bins as f64) as usize).min(bins - 1)
        } else {
            0
        };
        hist[bin] += 1;
    }
    hist
}

pub fn graph_inspect(
    config: &RunConfig,
    epoch: u32,
    dump: Option<&Path>,
) -> Result<(), CliError> {
    let tc = config.to_train_config();
    if !tc.schedule.contains(epoch) {
        let scheduled: Vec<String> = tc.schedule.epochs().map(|e| e.to_string()).collect();
        return Err(CliError::Usage(format!(
            "epoch {epoch} is not a rebuild epoch (scheduled: {})",
            scheduled.join(", ")
        )));
    }
    let split = load_dataset(config)?;
    let graphs = rebuild_all(&split.train, DEFAULT_K, epoch)?;
    let n = split.train.num_users;
    let k_cap = DEFAULT_K.min(n.saturating_sub(1));
    println!("graphs at epoch {epoch}: {n} users, k = {k_cap}");
    println!();
    println!("{:<10} {:>6} {:>6} {:>14} {:>13}", "kind", "deg_min", "deg_max", "mean_entropy", "max_entropy");
    let uniform_bound = (k_cap.max(1) as f64).ln();
    for g in graphs.all() {
        let degrees: Vec<usize> = g.neighbors.iter().map(Vec::len).collect();
        let mean_h =
            g.neighbors.iter().map(|e| weight_entropy(e)).sum::<f64>() / n as f64;
        println!(
            "{:<10} {:>6} {:>6} {:>14.4} {:>13.4}",
            g.kind.to_string(),
            degrees.iter().min().unwrap(),
            degrees.iter().max().unwrap(),
            mean_h,
            uniform_bound
        );
    }
    println!();
    println!("entropy histogram, 10 bins over [0, ln k]:");
    for g in graphs.all() {
        println!("{:<10} {:?}", g.kind.to_string(), entropy_histogram(g, uniform_bound, 10));
    }
    println!();
    println!("neighbor overlap (mean Jaccard):");
    let all = graphs.all();
    print!("{:<10}", "");
    for g in all {
        print!(" {:>8}", g.kind.to_string());
    }
    println!();
    for a in all {
        print!("{:<10}", a.kind.to_string());
        for b in all {
            print!(" {:>8.4}", neighbor_overlap(a, b));
        }
        println!();
    }
    if let Some(path) = dump {
        write_atomic(path, &graphs.to_csv())?;
        println!();
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dgsagnn_core::similarity::SimilarityKind;

    #[test]
    fn uniform_weights_hit_the_entropy_bound() {
        let edges: Vec<(u32, f64)> = (0..8).map(|v| (v, 0.125)).collect();
        assert!((weight_entropy(&edges) - (8.0f64).ln()).abs() < 1e-12);
        assert_eq!(weight_entropy(&[(3, 1.0)]), 0.0);
        assert_eq!(weight_entropy(&[]), 0.0);
    }

    #[test]
    fn overlap_of_a_graph_with_itself_is_one() {
        let g = SimilarityGraph {
            kind: SimilarityKind::Cosine,
            neighbors: vec![vec![(1, 0.6), (2, 0.4)], vec![(0, 1.0)], vec![]],
        };
        assert_eq!(neighbor_overlap(&g, &g), 1.0);
    }

    #[test]
    fn overlap_counts_shared_neighbors_per_user() {
        let a = SimilarityGraph {
            kind: SimilarityKind::Cosine,
            neighbors: vec![vec![(1, 0.5), (2, 0.5)], vec![(0, 1.0)]],
        };
        let b = SimilarityGraph {
            kind: SimilarityKind::Jaccard,
            neighbors: vec![vec![(2, 0.5), (3, 0.5)], vec![(0, 1.0)]],
        };
        // User 0: {1,2} vs {2,3} gives 1/3; user 1 matches exactly.
        assert!((neighbor_overlap(&a, &b) - (1.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn run_specs_parse_both_forms() {
        assert_eq!("lightgcn".parse::<RunSpec>().unwrap(), RunSpec::Lightgcn);
        assert_eq!(
            "dgsagnn:all-fused".parse::<RunSpec>().unwrap(),
            RunSpec::Dgsagnn(Similarity::AllFused)
        );
        assert!("ncf".parse::<RunSpec>().is_err());
        assert!("dgsagnn:euclid".parse::<RunSpec>().is_err());
    }

    #[test]
    fn comparison_rows_format_stably() {
        let rows = vec![
            Row { label: "dgsagnn(dpcc)".into(), recall: 0.1622, ndcg: 0.0654 },
            Row { label: "lightgcn".into(), recall: 0.158, ndcg: 0.0663 },
        ];
        let csv = comparison_csv(&rows);
        assert!(csv.starts_with("method,recall_at_20,ndcg_at_20\n"));
        assert!(csv.contains("dgsagnn(dpcc),0.1622,0.0654\n"));
        let md = comparison_markdown(&rows);
        assert!(md.contains("| lightgcn | 0.1580 | 0.0663 |"));
    }

    #[test]
    fn atomic_write_replaces_existing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_atomic(&path, "first").unwrap();
        write_atomic(&path, "second").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second");
    }
}
