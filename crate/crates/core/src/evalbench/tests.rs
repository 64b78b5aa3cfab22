use super::*;

fn micro() -> BenchConfig {
    BenchConfig {
        dataset: DatasetConfig {
            image_size: 16,
            num_classes: 3,
            samples_per_domain: 48,
            test_samples_per_domain: 40,
            ..DatasetConfig::default()
        },
        model: ModelConfig {
            proj_hidden: 8,
            ..ModelConfig::micro()
        },
        pretrain: PretrainConfig {
            epochs: 1,
            batch_size: 8,
            ..PretrainConfig::default()
        },
        pretrain_pool: 200,
        train: TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 5e-3,
            val_fraction: 0.2,
            ..TrainConfig::default()
        },
        methods: vec![Method::Lad, Method::ErmLambda0],
        seeds: vec![0, 1],
        lambda_spot_check: false,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

#[test]
fn config_validation() {
    assert!(micro().validate().is_ok());
    let mut c = micro();
    c.seeds.clear();
    assert!(matches!(c.validate(), Err(BenchError::Config(_))));
    let mut c = micro();
    c.dataset.image_size = 32;
    assert!(matches!(c.validate(), Err(BenchError::Config(_))));
    let mut c = micro();
    c.methods.clear();
    assert!(c.validate().is_err());
    let c = micro();
    assert_eq!(c.run_config(Method::Grl, 9).seed, 9);
    assert_eq!(c.run_config(Method::Grl, 9).method, Method::Grl);
}

#[test]
fn pretrain_pool_avoids_dataset_content() {
    let cfg = micro();
    let data = generate_dataset(&cfg.dataset).unwrap();
    let pool = pretrain_pool(&cfg, &data, 3);
    assert_eq!(pool.len(), cfg.pretrain_pool);
    let used: HashSet<u64> = data.all_samples().map(|s| s.content_seed).collect();
    assert!(pool.iter().all(|s| !used.contains(&s.content_seed)));
    let domains: HashSet<&str> = pool.iter().map(|s| s.domain.as_str()).collect();
    assert_eq!(domains.len(), 1 + cfg.dataset.ood_domains.len());
}

#[test]
fn protocol_rows_and_summary() {
    let cfg = micro();
    let mut seen = 0;
    let out = run_protocol(&cfg, |_| seen += 1).unwrap();
    let r = &out.report;
    assert_eq!(seen, 4);
    assert_eq!(r.rows.len(), 4);

    for row in &r.rows {
        assert_eq!(row.run_id, run_id(row.method, row.seed));
        assert_eq!(row.ood.len(), cfg.dataset.ood_domains.len());
        assert_eq!(row.id.n, cfg.dataset.test_samples_per_domain);
        assert!((0.0..=1.0).contains(&row.id.dice));
        assert!((0.0..=1.0).contains(&row.probe_accuracy));
        let avg = row.ood.iter().map(|d| d.dice).sum::<f64>() / row.ood.len() as f64;
        assert!(close(row.avg_ood_dice, avg));
        assert!(close(row.gap, row.id.dice - row.avg_ood_dice));
    }
    // One frozen encoder per seed, shared by all methods.
    for s in &cfg.seeds {
        let hashes: HashSet<&str> = r.rows.iter().filter(|x| x.seed == *s).map(|x| x.encoder_hash.as_str()).collect();
        assert_eq!(hashes.len(), 1);
    }
    assert_ne!(r.rows[0].encoder_hash, r.rows[2].encoder_hash);

    for m in &r.summary {
        let rows: Vec<&RunRow> = r.rows.iter().filter(|x| x.method == m.method).collect();
        assert_eq!(m.seeds, rows.len());
        let v: Vec<f64> = rows.iter().map(|x| x.avg_ood_dice).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        assert!(close(m.avg_ood_dice.mean, mean));
        assert!(close(m.avg_ood_dice.std, var.sqrt()));
        assert_eq!(m.domains[0].domain, "id");
        assert_eq!(m.domains.len(), 1 + cfg.dataset.ood_domains.len());
        let gap: Vec<f64> = rows.iter().map(|x| x.gap).collect();
        assert!(close(m.gap.mean, gap.iter().sum::<f64>() / gap.len() as f64));
    }

    let o = &r.orderings;
    assert_eq!(o.len(), 1, "only lad vs erm is available");
    assert_eq!(o[0].seeds, 2);
    let wins = cfg
        .seeds
        .iter()
        .filter(|&&s| {
            let f = |m| r.rows.iter().find(|x| x.method == m && x.seed == s).unwrap().avg_ood_dice;
            f(Method::Lad) > f(Method::ErmLambda0)
        })
        .count();
    assert_eq!(o[0].wins, wins);
}

#[test]
fn protocol_is_deterministic() {
    let mut cfg = micro();
    cfg.seeds = vec![4];
    let a = run_protocol(&cfg, |_| {}).unwrap();
    let b = run_protocol(&cfg, |_| {}).unwrap();
    assert_eq!(a.report, b.report);
    for (x, y) in a.runs.iter().zip(&b.runs) {
        assert_eq!(x.snapshot.to_bytes(), y.snapshot.to_bytes());
        assert_eq!(x.log.to_jsonl(), y.log.to_jsonl());
    }
}

#[test]
fn ablation_runs_all_methods_with_spot_check() {
    let mut cfg = micro();
    cfg.seeds = vec![1];
    let out = ablation_suite(&cfg, |_| {}).unwrap();
    let methods: Vec<Method> = out.report.rows.iter().map(|r| r.method).collect();
    assert_eq!(methods, Method::ALL.to_vec());
    assert_eq!(out.report.orderings.len(), 4);
    assert_eq!(out.report.spot_checks.len(), 1);
    assert!(out.report.spot_checks[0].identical);
}

#[test]
fn spot_check_requires_erm() {
    let mut cfg = micro();
    cfg.seeds = vec![0];
    cfg.methods = vec![Method::Lad];
    cfg.lambda_spot_check = true;
    assert!(matches!(run_protocol(&cfg, |_| {}), Err(BenchError::Config(_))));
}

fn fake_row(method: Method, seed: u64, id: f64, ood: &[f64], domain_names: &[&str]) -> RunRow {
    let score = |name: &str, dice: f64| DomainScore {
        domain: name.to_string(),
        n: 10,
        dice,
        hd95: Some(dice * 10.0),
        hd95_sentinels: 0,
    };
    let avg = ood.iter().sum::<f64>() / ood.len() as f64;
    RunRow {
        run_id: run_id(method, seed),
        method,
        seed,
        encoder_hash: format!("enc{seed}"),
        snapshot_hash: format!("snap{method}{seed}"),
        best_epoch: 1,
        best_val_dice: id,
        id: score("id", id),
        ood: ood.iter().zip(domain_names).map(|(&d, n)| score(n, d)).collect(),
        avg_ood_dice: avg,
        avg_ood_hd95: Some(avg * 10.0),
        gap: id - avg,
        probe_accuracy: 0.5,
    }
}

fn fake_report() -> BenchReport {
    let names = ["t2, noisy", "inverted \"bias\""];
    let mut rows = Vec::new();
    for (i, m) in Method::ALL.into_iter().enumerate() {
        for s in 0..3u64 {
            let base = 0.5 + 0.01 * i as f64 + 0.003 * s as f64;
            rows.push(fake_row(m, s, base + 0.2, &[base, base - 0.05], &names));
        }
    }
    let mut cfg = BenchConfig::default();
    cfg.seeds = vec![0, 1, 2];
    BenchReport {
        summary: summarize_rows(&Method::ALL, &rows),
        orderings: orderings(&rows, &cfg.seeds),
        config: cfg,
        rows,
        spot_checks: vec![SpotCheck { seed: 0, identical: true }],
        intervention: None,
        notes: vec!["Hard cases are induced corruptions.".into()],
    }
}

#[test]
fn orderings_count_wins() {
    let r = fake_report();
    let lad_erm = r.orderings.iter().find(|o| o.better == Method::Lad && o.other == Method::ErmLambda0).unwrap();
    // erm is listed after lad in ALL so has higher fake scores.
    assert_eq!((lad_erm.wins, lad_erm.seeds), (0, 3));
    let grl_erm = r.orderings.iter().find(|o| o.better == Method::Grl).unwrap();
    assert_eq!((grl_erm.wins, grl_erm.fraction), (3, 1.0));
}

#[test]
fn report_files_round_trip() {
    let r = fake_report();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&r, dir.path(), &ReportFormat::ALL).unwrap();
    assert_eq!(files.len(), 3);

    let back = load_report(&dir.path().join("report.json")).unwrap();
    assert_eq!(back, r);
    let again = tempfile::tempdir().unwrap();
    emit_report(&back, again.path(), &ReportFormat::ALL).unwrap();
    for f in ["report.json", "report.csv", "report.md"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(again.path().join(f)).unwrap(),
            "{f}"
        );
    }

    let mut rd = csv::Reader::from_path(dir.path().join("report.csv")).unwrap();
    let recs: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(recs.len(), r.rows.len() * 3);
    assert!(recs.iter().any(|x| &x[3] == "t2, noisy"));
    assert!(recs.iter().any(|x| &x[3] == "inverted \"bias\""));

    let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    let domain_rows = md.lines().filter(|l| l.starts_with("| ") && l.matches('|').count() == 5).count();
    // Per-domain rows plus the header, for both tables.
    assert_eq!(domain_rows, 4 * 3 + 1 + 4 + 1);
    assert!(md.contains("Hard cases are induced corruptions."));
}

#[test]
fn manifest_hashes_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("b.txt");
    let b = dir.path().join("a.txt");
    std::fs::write(&a, "hello").unwrap();
    std::fs::write(&b, "").unwrap();
    let m = write_manifest(dir.path(), &[a.clone(), b.clone()]).unwrap();
    assert_eq!(m.entries.iter().map(|e| e.path.as_str()).collect::<Vec<_>>(), ["a.txt", "b.txt"]);
    assert_eq!(m.entries[1].bytes, 5);
    assert_eq!(
        m.entries[1].sha256,
        "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
    );
    let first = std::fs::read(dir.path().join("manifest.json")).unwrap();
    write_manifest(dir.path(), &[b, a]).unwrap();
    assert_eq!(std::fs::read(dir.path().join("manifest.json")).unwrap(), first);
}
