use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use edgeflow::baselines::{build_target_histogram, histogram_match, mean_volume, ssimh};
use edgeflow::config::RunConfig;
use edgeflow::edges::adaptive_edge_detect;
use edgeflow::field::{load_checkpoint, save_checkpoint};
use edgeflow::flow::loss_trace_csv;
use edgeflow::metrics::{evaluate, threshold_segmentation, with_dice};
use edgeflow::phantom::Corpus;
use edgeflow::pipeline::{harmonize_volume, phantom_corpus, train_target};
use edgeflow::volume::{load_volume, save_volume, write_atomic};
use edgeflow::{Error, Result, Volume3D, VolumeFormat};

use crate::args::{BaselineMethod, Command};

/// The output directory of one invocation.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| io(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn log(&self, line: &str) -> Result<()> {
        let path = self.path("log.txt");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| io(&path, e))
    }

    fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(name);
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn read_input(path: &Path, cfg: &RunConfig) -> Result<Volume3D> {
    cfg.volume.prepare(load_volume(path, VolumeFormat::from_path(path))?)
}

/// Runs one command and returns a one-line summary for stdout.
pub fn execute(command: &Command, cfg: &RunConfig, run: &RunDir) -> Result<String> {
    run.write_text("config.json", &cfg.to_json())?;
    run.log(&format!("command: {command:?}"))?;
    let summary = match command {
        Command::Phantom => phantom(cfg, run)?,
        Command::Edge { volume } => edge(volume, cfg, run)?,
        Command::Train { corpus } => train(corpus, cfg, run)?,
        Command::Harmonize { checkpoint, source } => harmonize(checkpoint, source, cfg, run)?,
        Command::Baseline {
            method,
            source,
            targets,
        } => baseline(*method, source, targets, cfg, run)?,
        Command::Eval {
            prediction,
            truth,
            dice_cuts,
        } => eval(prediction, truth, dice_cuts, cfg, run)?,
    };
    run.log(&summary)?;
    Ok(summary)
}

fn phantom(cfg: &RunConfig, run: &RunDir) -> Result<String> {
    let corpus = phantom_corpus(cfg)?;
    let dir = run.path("corpus");
    corpus.save(&dir)?;
    Ok(format!(
        "wrote {} subjects ({} source contrasts) to {}",
        corpus.subjects.len(),
        corpus.source_contrasts.len(),
        dir.display()
    ))
}

fn edge(volume: &Path, cfg: &RunConfig, run: &RunDir) -> Result<String> {
    let v = read_input(volume, cfg)?;
    let e = adaptive_edge_detect(&v, &cfg.edges)?;
    let path = run.path("edges.hvol");
    e.save(&path)?;
    Ok(format!(
        "edge fraction {:.4} at threshold {:.5}, wrote {}",
        e.edge_fraction(),
        e.threshold_used(),
        path.display()
    ))
}

fn train(corpus_dir: &Path, cfg: &RunConfig, run: &RunDir) -> Result<String> {
    let corpus = Corpus::load(corpus_dir)?;
    let ids = if corpus.split.train.is_empty() {
        (0..corpus.subjects.len()).collect()
    } else {
        corpus.split.train.clone()
    };
    let targets: Vec<Volume3D> = ids.iter().map(|&i| corpus.subjects[i].target.clone()).collect();
    let ckpt = run.path("model.ckpt");
    let every = cfg.flow.train.checkpoint_every;
    let (field, trace) = train_target(&targets, cfg, |step, loss, f| {
        if step % 100 == 0 {
            run.log(&format!("step {step} loss {loss:.6}"))?;
        }
        if every > 0 && (step + 1) % every == 0 {
            save_checkpoint(f, &ckpt)?;
        }
        Ok(())
    })?;
    save_checkpoint(&field, &ckpt)?;
    run.write_text("loss.csv", &loss_trace_csv(&trace))?;
    let n = trace.len();
    let tail = &trace[n.saturating_sub(100)..];
    Ok(format!(
        "trained {} parameters for {n} steps on {} volumes, final mean loss {:.5}, wrote {}",
        field.param_count(),
        targets.len(),
        tail.iter().sum::<f64>() / tail.len() as f64,
        ckpt.display()
    ))
}

fn harmonize(checkpoint: &Path, source: &Path, cfg: &RunConfig, run: &RunDir) -> Result<String> {
    let field = load_checkpoint(checkpoint, None)?;
    let src = read_input(source, cfg)?;
    let h = harmonize_volume(&field, &src, cfg)?;
    save_volume(&h.flow, run.path("flow.hvol"))?;
    let out = run.path("harmonized.hvol");
    save_volume(&h.refined.volume, &out)?;
    run.log(&format!("edge fraction {:.4}", h.edges.edge_fraction()))?;
    run.log(&format!("refinement trace {:?}", h.refined.trace))?;
    Ok(format!("wrote {}", out.display()))
}

fn baseline(method: BaselineMethod, source: &Path, targets: &[PathBuf], cfg: &RunConfig, run: &RunDir) -> Result<String> {
    let src = read_input(source, cfg)?;
    let refs = targets.iter().map(|p| read_input(p, cfg)).collect::<Result<Vec<_>>>()?;
    let out = match method {
        BaselineMethod::Histmatch => histogram_match(&src, &build_target_histogram(&refs, cfg.baselines.histogram_bins)?)?,
        BaselineMethod::Ssimh => ssimh(&src, &mean_volume(&refs)?, cfg.baselines.ssimh_cutoff)?,
    };
    let path = run.path("baseline.hvol");
    save_volume(&out, &path)?;
    Ok(format!("{method:?} against {} references, wrote {}", refs.len(), path.display()))
}

fn eval(prediction: &Path, truth: &Path, cuts: &[f64], cfg: &RunConfig, run: &RunDir) -> Result<String> {
    let p = load_volume(prediction, VolumeFormat::from_path(prediction))?;
    let t = load_volume(truth, VolumeFormat::from_path(truth))?;
    let mut report = evaluate(&p, &t, &cfg.metrics)?;
    if !cuts.is_empty() {
        report = with_dice(report, &threshold_segmentation(&p, cuts)?, &threshold_segmentation(&t, cuts)?)?;
    }
    let json = report.to_json();
    let path = run.write_text("metrics.json", &json)?;
    Ok(format!("{}, wrote {}", json.replace('\n', " "), path.display()))
}
