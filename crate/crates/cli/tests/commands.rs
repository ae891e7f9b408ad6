use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use morphsnn_cli::commands::{
    diffusion_analyze, ood, parse_rho_range, perturb_eval, DiffusionArgs, GraphKind, OodArgs, PerturbArgs, SignalKind,
};
use morphsnn_cli::format::{Checkpoint, EventFrameFile};
use morphsnn_core::network::{MorphNet, NetConfig};
use morphsnn_core::ood::{metrics, Method, OodScoreSet};
use morphsnn_core::training::{evaluate, generate_dataset, DatasetKind, PerturbKind, TrainConfig};
use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphsnn")).args(args).output().unwrap()
}

fn tiny_config(beta: f64) -> TrainConfig {
    let net = NetConfig { channels: 4, height: 8, width: 8, layers: 2, nodes: 3, k: 2, heads: 2, classes: 2, timesteps: 4, beta, ..NetConfig::default() };
    TrainConfig { net, ..TrainConfig::default() }
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Untrained checkpoints are enough for command plumbing.
    fn new(beta: f64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, kind, seed| {
            let data = generate_dataset(kind, 2, 5, [4, 2, 8, 8], seed).unwrap();
            EventFrameFile::new(data, 2).unwrap().write(&dir.path().join(name)).unwrap();
        };
        write("train.msnn", DatasetKind::MovingBar, 1);
        write("id.msnn", DatasetKind::MovingBar, 2);
        write("ood.msnn", DatasetKind::FlickerPattern, 3);
        let cfg = tiny_config(beta);
        let net = MorphNet::new(cfg.net_config(), 4).unwrap();
        Checkpoint::new(cfg, net).save(&dir.path().join("ck.json")).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn ood_args(&self, method: Method) -> OodArgs {
        OodArgs {
            train: self.path("train.msnn"),
            id: self.path("id.msnn"),
            ood: self.path("ood.msnn"),
            checkpoint: self.path("ck.json"),
            method,
            out: Some(self.path("scores.csv")),
        }
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_data_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.msnn");
    let out = bin(&["train", "--data", s(&missing), "--out", s(&dir.path().join("run"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.msnn"));
}

#[test]
fn unknown_config_key_is_an_error() {
    let f = Fixture::new(0.2);
    std::fs::write(f.path("bad.toml"), "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let out = bin(&["train", "--config", s(&f.path("bad.toml")), "--data", s(&f.path("train.msnn")), "--out", s(&f.path("run"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn unknown_method_lists_valid_ones() {
    let out = bin(&["ood", "--train", "a", "--id", "b", "--ood", "c", "--checkpoint", "d", "--method", "mahalanobis"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for m in Method::ALL {
        assert!(err.contains(m.as_str()), "{err}");
    }
}

#[test]
fn static_checkpoint_warns_for_dgp() {
    let f = Fixture::new(1.0);
    let outcome = ood(&f.ood_args(Method::Dgp)).unwrap();
    assert_eq!(outcome.warnings.len(), 1);
    assert!(outcome.scores.id_scores.iter().all(|&v| v == outcome.scores.id_scores[0]));
    let out = bin(&[
        "ood", "--train", s(&f.path("train.msnn")), "--id", s(&f.path("id.msnn")), "--ood", s(&f.path("ood.msnn")), "--checkpoint",
        s(&f.path("ck.json")), "--method", "dgp",
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let dynamic = Fixture::new(0.2);
    assert!(ood(&dynamic.ood_args(Method::Dgp)).unwrap().warnings.is_empty());
}

#[test]
fn ood_metrics_match_library_and_csv() {
    let f = Fixture::new(0.2);
    for method in Method::ALL {
        let o = ood(&f.ood_args(method)).unwrap();
        assert_eq!(o.metrics, metrics(&OodScoreSet { method, ..o.scores.clone() }).unwrap());
        let mut rdr = csv::Reader::from_path(f.path("scores.csv")).unwrap();
        let headers = rdr.headers().unwrap().clone();
        assert_eq!(headers.iter().collect::<Vec<_>>(), ["sample_id", "split", "label", "method", "score", "flagged"]);
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 20);
        for (r, row) in rows.iter().zip(&o.rows) {
            assert_eq!(r[4].parse::<f64>().unwrap(), row.score);
            assert_eq!(&r[3], method.as_str());
        }
    }
}

#[test]
fn perturb_rows_cover_range_and_rho_zero_is_clean() {
    let f = Fixture::new(0.2);
    let rhos = parse_rho_range("0..9").unwrap();
    assert_eq!(rhos.len(), 10);
    let args = PerturbArgs {
        checkpoint: f.path("ck.json"),
        static_checkpoint: Some(f.path("ck.json")),
        data: f.path("id.msnn"),
        kinds: vec![PerturbKind::SaltPepper, PerturbKind::FrameLoss],
        rhos: rhos.clone(),
        seed: 2020,
        out: Some(f.path("perturb.csv")),
    };
    let rows = perturb_eval(&args).unwrap();
    assert_eq!(rows.len(), 20);
    let ck = Checkpoint::load(&f.path("ck.json")).unwrap();
    let data = EventFrameFile::read(&f.path("id.msnn")).unwrap();
    let clean = evaluate(&ck.net, &data.samples, None, 0).unwrap().accuracy;
    for r in rows.iter().filter(|r| r.rho == 0) {
        assert_eq!(r.accuracy, clean);
    }
    assert!(rows.iter().all(|r| r.static_accuracy == Some(r.accuracy)));
    let text = std::fs::read_to_string(f.path("perturb.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "kind,rho,full_accuracy,static_accuracy");
    assert_eq!(text.lines().count(), 21);
}

#[test]
fn rho_range_parsing() {
    assert_eq!(parse_rho_range("6").unwrap(), vec![6]);
    assert_eq!(parse_rho_range("2..=4").unwrap(), vec![2, 3, 4]);
    assert!(parse_rho_range("0..10").is_err());
    assert!(parse_rho_range("5..2").is_err());
}

fn analyze(nodes: usize, graph: GraphKind, signal: SignalKind) -> morphsnn_cli::commands::DiffusionAnalysis {
    diffusion_analyze(&DiffusionArgs { nodes, steps: 6, graph, signal, features: 2, seed: 3, out: None }).unwrap()
}

#[test]
fn diffusion_analysis_cases() {
    let single = analyze(1, GraphKind::Complete, SignalKind::Random);
    assert_eq!(single.rows.len(), 1);
    for graph in [GraphKind::Random, GraphKind::Path, GraphKind::Complete] {
        let a = analyze(7, graph, SignalKind::Random);
        assert!(a.passed(), "{graph:?}: {}", a.verdict());
        assert_eq!(a.rows.len(), 7);
    }
    let k2 = analyze(2, GraphKind::Complete, SignalKind::Alternating);
    assert!(k2.rows.iter().all(|r| r.dirichlet_energy == k2.rows[0].dirichlet_energy));
    assert!(k2.csv.starts_with("step,dirichlet_energy,lambda_min,lambda_max\n"));
}
