//! End-to-end commands behind the CLI: training sweeps, attack replays,
//! report generation, and partition inspection.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{run_inversion, surrogate_gradient, ImageShape};
use crate::config::{serialize_config, DatasetSource, ExperimentConfig, Stage};
use crate::data_io::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::federation::{client_update, dirichlet_partition, round_log_csv, run_federation, ClientDataset, FederationConfig};
use crate::metrics::{self, ImagePairScore, ScoreRecord};
use crate::models::{load_model, save_model};
use crate::rng;

/// One attack replay against a single client, as persisted to disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackRecord {
    pub client: usize,
    pub stage: String,
    pub severity: f64,
    pub iterations: usize,
    pub final_objective: f64,
    /// Dataset indices of the victim batch, in shuffle order.
    pub batch_indices: Vec<usize>,
    pub per_image: Vec<ImagePairScore>,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    match &cfg.dataset {
        DatasetSource::Synth { count, side, classes } => {
            let mut rng = rng::substream(cfg.federation.seed, "dataset", 0, 0);
            Ok(data_io::synth_digits(*count, *side, *classes, &mut rng))
        }
        DatasetSource::Idx { images, labels, downscale } => {
            let mut ds = data_io::load_idx(images, labels)?;
            if *downscale > 1 {
                ds.images = ds
                    .images
                    .iter()
                    .map(|img| data_io::downscale(img, *downscale))
                    .collect::<Result<_>>()?;
            }
            Ok(ds)
        }
    }
}

pub fn protection_label(severity: f64) -> String {
    if severity == 0.0 {
        "none".to_string()
    } else {
        format!("s={severity}")
    }
}

fn severity_dir(out: &Path, severity: f64) -> PathBuf {
    out.join(format!("s{severity}"))
}

fn model_path(out: &Path, severity: f64, stage: Stage) -> PathBuf {
    severity_dir(out, severity).join(format!("model_{}.famb", stage.as_str()))
}

/// Specialize the federation config to one sweep point; severity 0
/// disables the defense entirely.
pub fn fed_config_for_severity(base: &FederationConfig, severity: f64) -> FederationConfig {
    let mut cfg = base.clone();
    if severity == 0.0 {
        cfg.defense_enabled = false;
    } else {
        cfg.defense_enabled = true;
        cfg.aug_cfg.severity = severity;
    }
    cfg
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Train one federation per severity in the sweep, leaving a round log
/// and untrained/convergent snapshots under `<out>/s<severity>/`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    write_file(&cfg.out_dir.join("config.txt"), serialize_config(cfg).as_bytes())?;
    let manifest = data_io::DatasetManifest {
        name: data.name.clone(),
        count: data.len(),
        side: data.images.first().map(|i| i.height).unwrap_or(0),
        classes: data.class_count,
    };
    write_file(
        &cfg.out_dir.join("dataset.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    for &severity in &cfg.severities {
        let fed = fed_config_for_severity(&cfg.federation, severity);
        let run = run_federation(&fed, &data)?;
        let dir = severity_dir(&cfg.out_dir, severity);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_file(&dir.join("round_log.csv"), round_log_csv(&run.records).as_bytes())?;
        save_model(&run.initial_model, &model_path(&cfg.out_dir, severity, Stage::Untrained))?;
        save_model(&run.final_model, &model_path(&cfg.out_dir, severity, Stage::Convergent))?;
        let last = run.records.last().expect("at least one round");
        println!(
            "severity {severity}: {} rounds, final accuracy {:.4}",
            run.records.len(),
            last.test_accuracy
        );
    }
    Ok(())
}

/// The clients a replay targets: ascending ids among those with enough
/// training samples to fill one attack batch.
fn victim_clients(
    partitions: &[ClientDataset],
    batch_size: usize,
    count: usize,
) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = (0..partitions.len())
        .filter(|&i| partitions[i].train_size() >= batch_size)
        .collect();
    if eligible.len() < count {
        return Err(Error::config(format!(
            "only {} clients hold at least {batch_size} training samples, need {count}",
            eligible.len()
        )));
    }
    Ok(eligible[..count].to_vec())
}

/// Replay one defended (or undefended) local update per victim client
/// and attack the observed weight delta. Writes reconstructed and truth
/// images plus a JSON record per victim.
pub fn cmd_attack(cfg: &ExperimentConfig, stage: Stage, severity: f64) -> Result<()> {
    cfg.validate()?;
    let snapshot = model_path(&cfg.out_dir, severity, stage);
    if !snapshot.exists() {
        return Err(Error::config(format!(
            "missing model snapshot {} (run the train command first)",
            snapshot.display()
        )));
    }
    let model = load_model(&snapshot)?;
    let data = load_dataset(cfg)?;
    let fed = fed_config_for_severity(&cfg.federation, severity);
    let mut part_rng = rng::substream(fed.seed, "partition", 0, 0);
    let partitions = dirichlet_partition(&data, fed.clients, fed.alpha_part, &mut part_rng)?;
    let victims = victim_clients(&partitions, cfg.attack.batch_size, cfg.attacks_per_cell)?;
    let stage_idx = match stage {
        Stage::Untrained => 0,
        Stage::Convergent => 1,
    };

    for &client in &victims {
        let part = &partitions[client];
        // the victim's first batch under its seeded shuffle
        let mut order = part.train_idx.clone();
        let mut batch_rng = rng::substream(fed.seed, "attack-batch", client as u64, stage_idx);
        use rand::seq::SliceRandom;
        order.shuffle(&mut batch_rng);
        let picked = &order[..cfg.attack.batch_size];
        let truth: Vec<_> = picked.iter().map(|&i| part.images[i].clone()).collect();
        let labels: Vec<usize> = picked.iter().map(|&i| part.labels[i]).collect();
        let victim_data = ClientDataset {
            images: truth.clone(),
            labels: labels.clone(),
            train_idx: (0..truth.len()).collect(),
            test_idx: Vec::new(),
        };
        let mut local = fed.clone();
        local.local_epochs = cfg.attack.local_epochs_observed;
        local.batch_size = cfg.attack.batch_size;
        let mut upd_rng = rng::substream(fed.seed, "attack-update", client as u64, stage_idx);
        let (updated, _) = client_update(client, &model, &victim_data, &local, &mut upd_rng)?;
        let target = surrogate_gradient(&model, &updated, local.eta)?;

        let shape = ImageShape {
            height: truth[0].height,
            width: truth[0].width,
            channels: truth[0].channels,
        };
        let mut atk_rng = rng::substream(cfg.attack.seed, "attack", client as u64, stage_idx);
        let result = run_inversion(
            &target,
            &labels,
            &model,
            &cfg.attack,
            shape,
            Some(&truth),
            &mut atk_rng,
        )?;

        let tag = format!("{}_s{severity}_c{client}", stage.as_str());
        let recon_dir = cfg.out_dir.join("recon");
        fs::create_dir_all(&recon_dir).map_err(|e| Error::io(&recon_dir, e))?;
        let mut per_image = Vec::new();
        for (i, img) in result.reconstructed.iter().enumerate() {
            let matched = &truth[result.permutation[i]];
            let mut score = metrics::score_pair(img, matched)?;
            if !score.psnr.is_finite() {
                score.psnr = 1e9; // JSON cannot carry infinities
            }
            per_image.push(score);
            data_io::write_image(img, &recon_dir.join(format!("{tag}_r{i}.pgm")))?;
            data_io::write_image(matched, &recon_dir.join(format!("{tag}_t{i}.pgm")))?;
        }
        let record = AttackRecord {
            client,
            stage: stage.as_str().to_string(),
            severity,
            iterations: cfg.attack.iterations,
            final_objective: result.final_objective,
            batch_indices: picked.to_vec(),
            per_image,
        };
        let json = serde_json::to_string_pretty(&record)?;
        write_file(
            &cfg.out_dir.join("attacks").join(format!("attack_{tag}.json")),
            json.as_bytes(),
        )?;
        println!(
            "client {client} stage {} severity {severity}: objective {:.6}, mean mse {:.6}",
            stage.as_str(),
            record.final_objective,
            record.per_image.iter().map(|s| s.mse).sum::<f64>() / record.per_image.len() as f64
        );
    }
    Ok(())
}

/// Run the attack over every (stage, severity) cell in the config.
pub fn cmd_attack_all(cfg: &ExperimentConfig) -> Result<()> {
    for &severity in &cfg.severities {
        for &stage in &cfg.stages {
            cmd_attack(cfg, stage, severity)?;
        }
    }
    Ok(())
}

fn final_accuracy(out: &Path, severity: f64) -> Result<f64> {
    let path = severity_dir(out, severity).join("round_log.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let last = text
        .lines()
        .filter(|l| !l.is_empty())
        .last()
        .ok_or_else(|| Error::config(format!("{}: empty round log", path.display())))?;
    let field = last.split(',').nth(3).ok_or_else(|| {
        Error::config(format!("{}: malformed round log row", path.display()))
    })?;
    field
        .parse()
        .map_err(|e| Error::config(format!("{}: bad accuracy field: {e}", path.display())))
}

/// Aggregate attack records into the defense report plus a trade-off
/// table pairing each protection level's utility (final test accuracy)
/// with mean reconstruction quality. Writes both CSVs under
/// `<out>/report/`.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<()> {
    let attacks_dir = cfg.out_dir.join("attacks");
    let entries = fs::read_dir(&attacks_dir).map_err(|e| Error::io(&attacks_dir, e))?;
    let mut records: Vec<AttackRecord> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&attacks_dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        records.push(serde_json::from_str(&text)?);
    }
    if records.is_empty() {
        return Err(Error::config(format!(
            "no attack records under {} (run the attack command first)",
            attacks_dir.display()
        )));
    }
    records.sort_by(|a, b| {
        (a.severity, &a.stage, a.client)
            .partial_cmp(&(b.severity, &b.stage, b.client))
            .unwrap()
    });

    let mut scores = Vec::new();
    for rec in &records {
        for s in &rec.per_image {
            scores.push(ScoreRecord {
                stage: rec.stage.clone(),
                protection: protection_label(rec.severity),
                score: *s,
            });
        }
    }
    write_file(
        &cfg.out_dir.join("report").join("defense_report.csv"),
        metrics::defense_report(&scores).as_bytes(),
    )?;

    let mut tradeoff = String::from("severity,stage,accuracy,mean_mse,mean_ssim,mean_psnr\n");
    let mut cells: Vec<(f64, String)> = Vec::new();
    for rec in &records {
        let key = (rec.severity, rec.stage.clone());
        if !cells.contains(&key) {
            cells.push(key);
        }
    }
    for (severity, stage) in &cells {
        let pool: Vec<&ImagePairScore> = records
            .iter()
            .filter(|r| r.severity == *severity && r.stage == *stage)
            .flat_map(|r| r.per_image.iter())
            .collect();
        let n = pool.len() as f64;
        let mean = |f: &dyn Fn(&ImagePairScore) -> f64| pool.iter().map(|s| f(s)).sum::<f64>() / n;
        let acc = final_accuracy(&cfg.out_dir, *severity)?;
        tradeoff.push_str(&format!(
            "{severity},{stage},{acc:.6},{:.6},{:.6},{}\n",
            mean(&|s| s.mse),
            mean(&|s| s.ssim),
            metrics::format_psnr(mean(&|s| s.psnr)),
        ));
    }
    write_file(
        &cfg.out_dir.join("report").join("tradeoff.csv"),
        tradeoff.as_bytes(),
    )?;
    println!("wrote {}", cfg.out_dir.join("report").display());
    Ok(())
}

/// Print the non-IID partition as CSV: one row per client with its
/// split sizes and per-class sample counts.
pub fn cmd_partition_inspect(cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let mut part_rng = rng::substream(cfg.federation.seed, "partition", 0, 0);
    let partitions =
        dirichlet_partition(&data, cfg.federation.clients, cfg.federation.alpha_part, &mut part_rng)?;
    let classes = data.class_count;
    let mut out = String::from("client,total,train,test");
    for c in 0..classes {
        out.push_str(&format!(",class{c}"));
    }
    out.push('\n');
    for (id, p) in partitions.iter().enumerate() {
        let mut counts = vec![0usize; classes];
        for &l in &p.labels {
            counts[l] += 1;
        }
        out.push_str(&format!(
            "{id},{},{},{}",
            p.labels.len(),
            p.train_idx.len(),
            p.test_idx.len()
        ));
        for c in counts {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn tiny_config(out: &Path) -> ExperimentConfig {
        let text = format!(
            "dataset.source = synth\n\
             dataset.count = 60\n\
             dataset.side = 8\n\
             dataset.classes = 4\n\
             federation.clients = 3\n\
             federation.participation = 1.0\n\
             federation.rounds = 1\n\
             federation.eta = 0.05\n\
             federation.batch_size = 4\n\
             federation.deterministic = true\n\
             model.layer_sizes = 64,8,4\n\
             augmix.max_chain_len = 1\n\
             attack.iterations = 2\n\
             attack.batch_size = 2\n\
             attack.local_epochs_observed = 1\n\
             experiment.severities = 0,2\n\
             experiment.attacks_per_cell = 1\n\
             experiment.out_dir = {}\n",
            out.display()
        );
        parse_config(&text).unwrap()
    }

    #[test]
    fn severity_zero_disables_defense() {
        let base = ExperimentConfig::default().federation;
        assert!(!fed_config_for_severity(&base, 0.0).defense_enabled);
        let on = fed_config_for_severity(&base, 4.0);
        assert!(on.defense_enabled);
        assert_eq!(on.aug_cfg.severity, 4.0);
    }

    #[test]
    fn protection_labels() {
        assert_eq!(protection_label(0.0), "none");
        assert_eq!(protection_label(2.0), "s=2");
    }

    #[test]
    fn train_attack_report_pipeline() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path());
        cmd_train(&cfg).unwrap();
        for &sev in &cfg.severities {
            assert!(model_path(&cfg.out_dir, sev, Stage::Untrained).exists());
            assert!(model_path(&cfg.out_dir, sev, Stage::Convergent).exists());
            assert!(severity_dir(&cfg.out_dir, sev).join("round_log.csv").exists());
        }
        cmd_attack(&cfg, Stage::Untrained, 0.0).unwrap();
        cmd_attack(&cfg, Stage::Untrained, 2.0).unwrap();
        cmd_report(&cfg).unwrap();
        let report = std::fs::read_to_string(cfg.out_dir.join("report/defense_report.csv")).unwrap();
        assert!(report.contains("untrained,none"));
        assert!(report.contains("untrained,s=2"));
        let tradeoff = std::fs::read_to_string(cfg.out_dir.join("report/tradeoff.csv")).unwrap();
        assert!(tradeoff.starts_with("severity,stage,accuracy,mean_mse,mean_ssim,mean_psnr"));
    }

    #[test]
    fn attack_without_snapshot_names_the_path() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path());
        let err = cmd_attack(&cfg, Stage::Convergent, 2.0).unwrap_err();
        assert!(err.to_string().contains("model_convergent.famb"));
    }

    #[test]
    fn partition_inspect_rows_cover_all_clients() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path());
        let csv = cmd_partition_inspect(&cfg).unwrap();
        assert_eq!(csv.lines().count(), 1 + cfg.federation.clients);
    }

    #[test]
    fn deterministic_round_logs_are_byte_identical() {
        let tmp_a = tempfile::tempdir().unwrap();
        let tmp_b = tempfile::tempdir().unwrap();
        let mut cfg_a = tiny_config(tmp_a.path());
        let mut cfg_b = tiny_config(tmp_b.path());
        cfg_a.severities = vec![0.0];
        cfg_b.severities = vec![0.0];
        cmd_train(&cfg_a).unwrap();
        cmd_train(&cfg_b).unwrap();
        let log_a = std::fs::read(severity_dir(&cfg_a.out_dir, 0.0).join("round_log.csv")).unwrap();
        let log_b = std::fs::read(severity_dir(&cfg_b.out_dir, 0.0).join("round_log.csv")).unwrap();
        assert_eq!(log_a, log_b);
    }
}
