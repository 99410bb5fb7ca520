use tglobal_bench::{
    emit_report, loglog_slope, mask_timing, memory_ceiling, parse_csv, report_csv, run_benchmark, BenchConfig,
    ReportFormat, CSV_HEADER,
};
use tglobal_core::attention::count_kv_pairs;
use tglobal_core::AttentionMode;

fn small() -> BenchConfig {
    BenchConfig {
        d_model: 16,
        num_heads: 2,
        d_ff: 32,
        radius: 8,
        block_size: 4,
        batch: 2,
        warmup_steps: 0,
        timed_steps: 1,
        repetitions: 3,
        ..BenchConfig::default()
    }
}

#[test]
fn points_carry_counted_pairs_and_positive_speed() {
    let cfg = small();
    let points = run_benchmark(&cfg, &[24, 40], &AttentionMode::ALL).unwrap();
    assert_eq!(points.len(), 6);
    for p in &points {
        assert_eq!(
            p.kv_pairs,
            count_kv_pairs(p.l, cfg.radius, cfg.block_size, p.mode, None)
        );
        assert!(p.sequences_per_second > 0.0 && p.wall_seconds > 0.0);
        let implied = (p.batch * p.steps_timed) as f64 / p.wall_seconds;
        assert!((p.sequences_per_second - implied).abs() <= 1e-9 * implied);
        assert!(p.peak_live_floats > 0);
        assert!(!p.exhausted);
    }
}

#[test]
fn empty_report_is_header_only() {
    assert_eq!(report_csv(&[]).unwrap(), CSV_HEADER.join(",") + "\n");
}

#[test]
fn two_point_golden_csv() {
    let points = run_benchmark(&small(), &[32], &[AttentionMode::Local, AttentionMode::TGlobal]).unwrap();
    let csv = report_csv(&points).unwrap();
    // kv_pairs: 32·17 − 8·9 = 472 for the band, plus 32·8 global pairs.
    let golden = "mode,l,r,k,d_model,heads,seq_per_sec,kv_pairs,peak_live_floats\n\
                  local,32,8,4,16,2,*,472,42913\n\
                  tglobal,32,8,4,16,2,*,728,44097\n";
    assert_eq!(mask_timing(&csv), golden);
    let again =
        report_csv(&run_benchmark(&small(), &[32], &[AttentionMode::Local, AttentionMode::TGlobal]).unwrap()).unwrap();
    assert_eq!(mask_timing(&again), golden);
}

#[test]
fn csv_round_trip() {
    let mut cfg = small();
    cfg.memory_budget = Some(20_000);
    let points = run_benchmark(&cfg, &[16, 64], &AttentionMode::ALL).unwrap();
    assert!(points.iter().any(|p| p.exhausted));
    let rows = parse_csv(&report_csv(&points).unwrap()).unwrap();
    assert_eq!(rows.len(), points.len());
    for (r, p) in rows.iter().zip(&points) {
        assert_eq!(
            (r.mode, r.l, r.r, r.k, r.d_model, r.heads),
            (p.mode, p.l, p.r, p.k, p.d_model, p.heads)
        );
        assert_eq!((r.kv_pairs, r.peak_live_floats), (p.kv_pairs, p.peak_live_floats));
        match r.seq_per_sec {
            None => assert!(p.exhausted),
            Some(s) => assert!((s - p.sequences_per_second).abs() <= 1e-5 * p.sequences_per_second),
        }
    }
}

#[test]
fn reports_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let points = run_benchmark(&small(), &[16], &[AttentionMode::Dense]).unwrap();
    emit_report(&points, &dir.path().join("b.csv"), ReportFormat::Csv).unwrap();
    emit_report(&points, &dir.path().join("b.json"), ReportFormat::Json).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("b.json")).unwrap()).unwrap();
    assert_eq!(json[0]["mode"], "dense");
    assert!(emit_report(&points, &dir.path().join("missing/b.csv"), ReportFormat::Csv).is_err());
}

#[test]
fn memory_ceilings_order_dense_tglobal_local() {
    let cfg = small();
    let lengths: Vec<usize> = (1..=16).map(|i| 32 * i).collect();
    let budget = 150_000;
    let c = |m| memory_ceiling(&cfg, m, &lengths, budget).unwrap().unwrap_or(0);
    let (dense, tglobal, local) = (
        c(AttentionMode::Dense),
        c(AttentionMode::TGlobal),
        c(AttentionMode::Local),
    );
    assert!(dense < tglobal && tglobal < local, "{dense} {tglobal} {local}");
}

#[test]
fn kv_pair_slopes() {
    let ls = [512.0, 1024.0, 2048.0, 4096.0, 8192.0];
    let count = |m, l: f64| count_kv_pairs(l as usize, 127, 16, m, None) as f64;
    let slope = |m| loglog_slope(&ls, &ls.map(|l| count(m, l)));
    assert!((slope(AttentionMode::Dense) - 2.0).abs() < 0.3);
    assert!((slope(AttentionMode::Local) - 1.0).abs() < 0.3);
    let global = ls.map(|l| count(AttentionMode::TGlobal, l) - count(AttentionMode::Local, l));
    assert!((loglog_slope(&ls, &global) - 2.0).abs() < 0.3);
    for (l, g) in ls.iter().zip(&global) {
        assert_eq!(*g, l * (l / 16.0));
    }
}

#[test]
fn thread_override_from_environment() {
    std::env::set_var(tglobal_bench::THREADS_ENV, "3");
    let cfg = BenchConfig::default().with_env_threads().unwrap();
    assert_eq!(cfg.threads, 3);
    let points = run_benchmark(&BenchConfig { threads: 3, ..small() }, &[16], &[AttentionMode::Local]).unwrap();
    assert!(points[0].sequences_per_second > 0.0);
    std::env::set_var(tglobal_bench::THREADS_ENV, "zero");
    assert!(BenchConfig::default().with_env_threads().is_err());
    std::env::remove_var(tglobal_bench::THREADS_ENV);
}
