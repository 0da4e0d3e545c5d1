//! One function per pipeline stage.

use std::collections::BTreeMap;

use anyhow::{ensure, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rfpa::dataset::{flags, generate, Message, Split};
use rfpa::evalkit::{roc_auc, CsvTable};
use rfpa::experiment::{ExperimentConfig, Stage};
use rfpa::fingerprint::{calibrate_threshold, first_per_transmitter, pair_distances, train_embedder, EmbedderModel};
use rfpa::formats::{embedder_to_file, gan_to_file, DatasetFile};
use rfpa::jamming::{evaluate_jamming, gaussian_baseline, optimize_jamming, ratio_sweep};
use rfpa::loopback::{ChannelConfig, PRESET_NAMES};
use rfpa::poisoning::{
    cross_transmitter_pairs, generate_poison_sequence, random_fingerprint, step_bound, threshold_sweep, verify_sequence,
    PoisonConfig, PoisonOutcome, PoisonStatus, PoisonTarget,
};
use rfpa::signal::IqWaveform;
use rfpa::spoofing::{evaluate_spoofing, optimize_spoof_gd, replay_pairs, train_gan_with, SpoofCurve};

use crate::run::{
    Calibration, Run, RunManifest, CALIBRATION_FILE, CLEAN_FILE, DATASET_FILE, EMBEDDER_FILE, GAN_DATASET_FILE, GAN_FILE,
};

fn owned_refs(ms: &[Message]) -> Vec<&Message> {
    ms.iter().collect()
}

/// Preset name of `channel`, or "custom".
fn channel_name(channel: &ChannelConfig) -> String {
    PRESET_NAMES
        .iter()
        .find(|n| ChannelConfig::preset(n).is_ok_and(|c| &c == channel))
        .map_or("custom".into(), |n| n.to_string())
}

pub fn gen_dataset(run: &Run) -> Result<()> {
    let cfg = &run.config;
    let d = generate(&cfg.dataset)?;
    let g = generate(&cfg.gan.dataset)?;
    let n_gan = cfg.gan.train_messages;
    let manifest = RunManifest {
        config_hash: run.hash.clone(),
        splits: d.manifest.clone(),
        gan_train: g.messages[..n_gan].iter().map(|m| m.id).collect(),
        gan_test: g.messages[n_gan..].iter().map(|m| m.id).collect(),
        outputs: BTreeMap::new(),
    };
    manifest.splits.check_disjoint()?;
    run.save_manifest(&manifest)?;

    let clean = Message {
        id: d.first_id(),
        transmitter_id: 0,
        flags: flags::CLEAN,
        waveform: d.header.clone(),
    };
    run.write(CLEAN_FILE, &DatasetFile::from_messages(&[clean])?.encode())?;
    run.write(DATASET_FILE, &DatasetFile::from_messages(&d.messages)?.encode())?;
    run.write(GAN_DATASET_FILE, &DatasetFile::from_messages(&g.messages)?.encode())?;
    println!(
        "{} records ({} train / {} validation / {} test), {} GAN headers",
        d.messages.len(),
        d.manifest.train.len(),
        d.manifest.validation.len(),
        d.manifest.test.len(),
        g.messages.len()
    );
    Ok(())
}

pub fn train(run: &Run) -> Result<()> {
    let train: Vec<(u32, IqWaveform)> = run
        .split(Split::Train)?
        .into_iter()
        .map(|m| (m.transmitter_id, m.waveform))
        .collect();
    ensure!(!train.is_empty(), "the train split is empty");
    let (model, log) = train_embedder(&train, &run.config.embedder)?;
    run.write(EMBEDDER_FILE, &embedder_to_file(&model, &run.hash)?.encode())?;
    let mut t = CsvTable::new(["epoch", "loss", "config_hash"]);
    for (k, l) in log.epoch_losses.iter().enumerate() {
        t.push(vec![(k + 1).to_string(), l.to_string(), run.hash.clone()])?;
    }
    run.write_csv("train_log.csv", &t)?;
    println!("final epoch loss {:.4}", log.epoch_losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

pub fn calibrate(run: &Run) -> Result<()> {
    let model = run.embedder()?;
    let val = run.split(Split::Validation)?;
    let refs = first_per_transmitter(&owned_refs(&val));
    let pairs: Vec<(IqWaveform, IqWaveform)> = run
        .non_reference_validation()?
        .into_iter()
        .map(|m| (m.waveform, refs[&m.transmitter_id].waveform.clone()))
        .collect();
    ensure!(!pairs.is_empty(), "the validation split has no calibration pairs");
    let c = &run.config.calibration;
    let accept = calibrate_threshold(&model, &pairs, c.target_tpr)?;
    let update = c.update_threshold.min(accept / 2.0);
    let mut accepted = 0;
    for (x, y) in &pairs {
        let d = rfpa::fingerprint::distance(&rfpa::fingerprint::embed(&model, x)?, &rfpa::fingerprint::embed(&model, y)?)?;
        accepted += usize::from(d < accept);
    }
    let cal = Calibration {
        config_hash: run.hash.clone(),
        accept,
        update,
        capacity: c.capacity,
        target_tpr: c.target_tpr,
        achieved_tpr: accepted as f64 / pairs.len() as f64,
        calibration_pairs: pairs.len(),
        reference_ids: refs.values().map(|m| m.id).collect(),
    };
    run.write(CALIBRATION_FILE, toml::to_string(&cal)?.as_bytes())?;
    println!("a = {accept:.4}, u = {update:.4}, accepts {:.3} of {} pairs", cal.achieved_tpr, pairs.len());
    Ok(())
}

pub fn attack_jam(run: &Run) -> Result<()> {
    let cfg = &run.config.jamming;
    let model = run.embedder()?;
    let policy = run.policy(&model)?;
    let n = cfg.signal.n_train_messages;
    let victims: Vec<Message> = run.non_reference_validation()?.into_iter().take(n).collect();
    ensure!(victims.len() == n, "only {} validation messages for {n} training victims", victims.len());
    let test = run.split(Split::Test)?;
    ensure!(!test.is_empty(), "the test split is empty");
    let seed = run.config.stage_seed(Stage::Jamming);
    let sweep = ratio_sweep(cfg.ratio_step_db);
    for (name, signal) in [
        ("jam_frr.csv", optimize_jamming(&model, &victims, &cfg.signal, seed)?),
        ("jam_frr_gaussian.csv", gaussian_baseline(&victims, &cfg.signal, seed)?),
    ] {
        let mut curve = evaluate_jamming(&model, &policy, &signal, &test, &sweep, cfg.trials_per_ratio, seed)?;
        curve.config_hash = run.hash.clone();
        run.write_csv(name, &curve.to_table())?;
        let crossing = curve.crossing(0.5).map_or("none".into(), |c| format!("{c:.1} dB"));
        println!("{name}: 50% FRR crossing {crossing}");
    }
    Ok(())
}

fn outcome_row(k: usize, kind: &str, o: &PoisonOutcome, verified: bool, hash: &str) -> Vec<String> {
    let (status, steps) = match o.status {
        PoisonStatus::Success { steps } => ("success", steps.to_string()),
        PoisonStatus::FailMaxSteps => ("fail_max_steps", String::new()),
        PoisonStatus::FailNoStep { at_step } => ("fail_no_step", at_step.to_string()),
    };
    vec![
        k.to_string(),
        kind.into(),
        status.into(),
        steps,
        step_bound(o.initial_distance, o.accept, o.update).to_string(),
        o.initial_distance.to_string(),
        verified.to_string(),
        hash.into(),
    ]
}

const OUTCOME_HEADER: [&str; 8] = ["pair", "target", "status", "steps", "step_bound", "initial_distance", "verified", "config_hash"];

pub fn attack_poison(run: &Run) -> Result<()> {
    let cfg = &run.config.poisoning;
    let model = run.embedder()?;
    let test = run.split(Split::Test)?;
    ensure!(!test.is_empty(), "the test split is empty");
    let seed = run.config.stage_seed(Stage::Poisoning);
    let pairs = cross_transmitter_pairs(&owned_refs(&test), cfg.pairs, seed);
    ensure!(!pairs.is_empty(), "poisoning needs messages from at least two transmitters");

    let mut outcomes = CsvTable::new(OUTCOME_HEADER);
    let mut wins = 0;
    for (k, (origin, target)) in pairs.iter().enumerate() {
        let o = generate_poison_sequence(&model, origin, target, &cfg.base, seed.wrapping_add(k as u64))?;
        let ok = o.is_success() && verify_sequence(&model, &o, cfg.base.inclusive)?.passed();
        wins += usize::from(ok);
        outcomes.push(outcome_row(k, "message", &o, ok, &run.hash))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = model.arch().embedding_dim;
    for k in 0..cfg.random_targets {
        let origin = &test[rng.random_range(0..test.len())].waveform;
        let target = PoisonTarget::Fingerprint(random_fingerprint(dim, rng.random())?);
        let o = generate_poison_sequence(&model, origin, &target, &cfg.base, rng.random())?;
        let ok = o.is_success() && verify_sequence(&model, &o, cfg.base.inclusive)?.passed();
        outcomes.push(outcome_row(k, "random", &o, ok, &run.hash))?;
    }
    run.write_csv("poison_outcomes.csv", &outcomes)?;
    println!("{wins}/{} message-target pairs poisoned and verified", pairs.len());

    let mut heat = CsvTable::default();
    for inclusive in [false, true] {
        let base = PoisonConfig { inclusive, ..cfg.base.clone() };
        let mut map = threshold_sweep(&model, &pairs, &cfg.accept_grid, &cfg.update_grid, &base, seed)?;
        map.config_hash = run.hash.clone();
        let t = map.to_table();
        if heat.header.is_empty() {
            heat.header = t.header.clone();
        }
        heat.rows.extend(t.rows);
    }
    run.write_csv("poison_heatmap.csv", &heat)?;
    Ok(())
}

pub fn attack_spoof_gd(run: &Run) -> Result<()> {
    let cfg = &run.config.spoof_gd;
    let model = run.embedder()?;
    let accept = run.calibration()?.accept;
    let train = run.non_reference_validation()?;
    let test = run.split(Split::Test)?;
    ensure!(!test.is_empty(), "the test split is empty");
    let attacker = run.config.attacker.profile();
    let seed = run.config.stage_seed(Stage::SpoofGd);
    let mut out = CsvTable::default();
    for name in &cfg.channels {
        let channel = ExperimentConfig::channel(name)?;
        let tr = replay_pairs(&owned_refs(&train), &attacker, &channel, seed, cfg.train_pairs)?;
        let te = replay_pairs(&owned_refs(&test), &attacker, &channel, seed ^ 1, cfg.test_pairs)?;
        for sync in [true, false] {
            let gd = rfpa::spoofing::SpoofGdConfig { phase_sync: sync, ..cfg.gd.clone() };
            let mut curve: SpoofCurve = optimize_spoof_gd(&model, accept, &tr, &te, &gd, seed)?;
            curve.config_hash = run.hash.clone();
            let t = curve.to_table();
            if out.header.is_empty() {
                out.header = std::iter::once("channel".to_string()).chain(t.header).collect();
            }
            for r in t.rows {
                out.push(std::iter::once(name.clone()).chain(r).collect())?;
            }
            let best = curve.points.iter().map(|p| p.success_rate).fold(0.0, f64::max);
            println!("{name} (phase sync {sync}): replay {:.3}, best {best:.3}", curve.replay_success_rate);
        }
    }
    run.write_csv("spoof_gd.csv", &out)?;
    Ok(())
}

fn gan_split(run: &Run) -> Result<(Vec<Message>, Vec<Message>)> {
    let m = run.manifest()?;
    let all = run.messages(GAN_DATASET_FILE)?;
    let pick = |ids: &[u64]| -> Vec<Message> { all.iter().filter(|x| ids.contains(&x.id)).cloned().collect() };
    Ok((pick(&m.gan_train), pick(&m.gan_test)))
}

pub fn train_gan(run: &Run) -> Result<()> {
    let (train, _) = gan_split(run)?;
    let attacker = run.config.attacker.profile();
    let mut log = CsvTable::new(["epoch", "discriminator_loss", "generator_loss", "config_hash"]);
    let gan = train_gan_with(&train, &attacker, &run.config.gan.train, |epoch, g| {
        let d = g.log.discriminator_losses.last().copied().unwrap_or(f64::NAN);
        log::info!("epoch {epoch}: discriminator loss {d:.4}");
        Ok(())
    })?;
    for (k, d) in gan.log.discriminator_losses.iter().enumerate() {
        let g = gan.log.generator_losses.get(k).map_or(String::new(), f64::to_string);
        log.push(vec![(k + 1).to_string(), d.to_string(), g, run.hash.clone()])?;
    }
    run.write(GAN_FILE, &gan_to_file(&gan, &run.hash)?.encode())?;
    run.write_csv("gan_log.csv", &log)?;
    println!("trained on {} headers of transmitter {}", train.len(), gan.transmitter_id);
    Ok(())
}

pub fn evaluate(run: &Run) -> Result<()> {
    let model: EmbedderModel = run.embedder()?;
    let test = run.split(Split::Test)?;
    ensure!(!test.is_empty(), "cannot evaluate: the test split is empty");
    let pd = pair_distances(&model, &owned_refs(&test))?;
    ensure!(
        !pd.same.is_empty() && !pd.different.is_empty(),
        "cannot evaluate: the test split needs two transmitters with two messages each"
    );
    let scores = pd.score_set();
    let mut t = CsvTable::new(["metric", "value", "config_hash"]);
    let mut row = |k: &str, v: f64| t.push(vec![k.into(), v.to_string(), run.hash.clone()]);
    row("verification_eer", rfpa::evalkit::eer(&scores)?)?;
    row("verification_auc", roc_auc(&scores)?)?;
    row("same_pairs", pd.same.len() as f64)?;
    row("different_pairs", pd.different.len() as f64)?;
    if let Ok(c) = run.calibration() {
        row("accept_threshold", c.accept)?;
        row("test_acceptance", pd.acceptance(c.accept))?;
    }
    run.write_csv("eval_verification.csv", &t)?;

    if run.path(GAN_FILE).exists() {
        let gan = run.gan()?;
        let (_, held_out) = gan_split(run)?;
        let channel = &run.config.gan.train.channel;
        let condition = channel_name(channel);
        let mut r = evaluate_spoofing(
            &model,
            &gan,
            &held_out,
            &run.config.attacker.profile(),
            channel,
            &condition,
            run.config.stage_seed(Stage::Evaluate),
        )?;
        r.config_hash = run.hash.clone();
        let mut s = CsvTable::new(["condition", "embedder", "attack", "auc", "eer", "config_hash"]);
        for (embedder, attack, sep) in [
            ("victim", "simple_replay", r.victim_simple),
            ("victim", "gan_replay", r.victim_gan),
            ("discriminator", "simple_replay", r.discriminator_simple),
            ("discriminator", "gan_replay", r.discriminator_gan),
        ] {
            s.push(vec![
                condition.clone(),
                embedder.into(),
                attack.into(),
                sep.auc.to_string(),
                sep.eer.to_string(),
                run.hash.clone(),
            ])?;
        }
        run.write_csv("eval_spoof.csv", &s)?;
        run.write_csv("eval_spoof_distances.csv", &r.to_table())?;
        println!(
            "{condition}: victim EER simple {:.4} / GAN {:.4}, discriminator AUC {:.4}",
            r.victim_simple.eer, r.victim_gan.eer, r.discriminator_simple.auc
        );
    }
    Ok(())
}
