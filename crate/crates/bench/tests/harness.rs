use std::collections::HashSet;
use std::process::Command;

use hades_bench::workload::zipf_mass;
use hades_bench::{
    run, BackendChoice, KeySpace, Mix, RankSampler, RunOptions, Structure, WorkloadSpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(records: u64, windows: u64) -> RunOptions {
    RunOptions {
        spec: WorkloadSpec {
            record_count: records,
            value_size: 256,
            mix: Mix::B,
            client_threads: 1,
            duration_windows: windows,
            ops_per_window: 5_000,
            ..WorkloadSpec::default()
        },
        exact_metrics: true,
        heap: hades::HeapConfig {
            segment_size: 256 << 10,
            region_bytes: 1 << 30,
            ..hades::HeapConfig::default()
        },
        ..RunOptions::default()
    }
}

#[test]
fn permutation_is_a_bijection() {
    let ks = KeySpace::new(10_000, 30, 77);
    let keys: HashSet<Vec<u8>> = (0..10_000).map(|r| ks.generate_key(r).unwrap()).collect();
    assert_eq!(keys.len(), 10_000);
    let idx: HashSet<u64> = (0..10_000).map(|r| ks.index_of(r).unwrap()).collect();
    assert_eq!(idx, (0..10_000).collect());
    // Hot ranks are not adjacent in the keyspace.
    let adjacent = (0..100)
        .filter(|&r| {
            ks.index_of(r)
                .unwrap()
                .abs_diff(ks.index_of(r + 1).unwrap())
                == 1
        })
        .count();
    assert!(adjacent < 5);
}

#[test]
fn top_rank_frequency_matches_zipf_mass() {
    let n = 100_000;
    let s = RankSampler::new(n, 0.99).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 1_000_000;
    let hits = (0..draws).filter(|_| s.sample(&mut rng) == 0).count();
    let empirical = hits as f64 / draws as f64;
    let analytic = zipf_mass(0, n, 0.99);
    assert!(
        (empirical / analytic - 1.0).abs() < 0.02,
        "{empirical} vs {analytic}"
    );
}

fn csv_without_timing(path: &std::path::Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().clone();
    let keep: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| !h.starts_with("latency"))
        .map(|(i, _)| i)
        .collect();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            keep.iter().map(|&i| rec[i].to_string()).collect()
        })
        .collect()
}

#[test]
fn identical_seeds_give_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for i in 0..2 {
        let mut o = small(4_000, 8);
        o.csv = Some(dir.path().join(format!("run{i}.csv")));
        run(&o).unwrap();
        outs.push(csv_without_timing(o.csv.as_ref().unwrap()));
    }
    assert_eq!(outs[0].len(), 8);
    assert_eq!(outs[0], outs[1]);
    let mut o = small(4_000, 8);
    o.spec.scatter_seed = 2;
    o.csv = Some(dir.path().join("other.csv"));
    run(&o).unwrap();
    assert_ne!(outs[0], csv_without_timing(o.csv.as_ref().unwrap()));
}

#[test]
fn collector_off_keeps_utilization_at_baseline() {
    let mut o = small(4_000, 10);
    o.spec.mix = Mix::C;
    o.collector = false;
    let r = run(&o).unwrap();
    let u: Vec<f64> = r
        .stats
        .iter()
        .map(|s| s.page_utilization.unwrap())
        .collect();
    let mean = u.iter().sum::<f64>() / u.len() as f64;
    assert!(u.iter().all(|x| (x - mean).abs() < 0.05 * mean), "{u:?}");
    assert!(r
        .stats
        .iter()
        .all(|s| s.rss_bytes == r.summary.post_load_rss));
    assert_eq!(r.summary.total_faults, 0);
}

#[test]
fn collector_reclaims_under_advice_backend() {
    let mut o = small(4_000, 12);
    o.spec.mix = Mix::C;
    o.spec.active_fraction = 0.2;
    let r = run(&o).unwrap();
    assert!(r.windows.iter().map(|w| w.moved).sum::<u64>() > 0);
    assert!(r.summary.first_proactive_window.is_some());
    assert!(
        r.summary.final_rss < r.summary.post_load_rss,
        "{:?}",
        r.summary
    );
}

#[test]
fn skiplist_and_update_mix_run() {
    let mut o = small(2_000, 4);
    o.structure = Structure::Skiplist;
    o.spec.mix = Mix::A;
    o.backend = BackendChoice::SimCgroup(1 << 20);
    let r = run(&o).unwrap();
    assert_eq!(r.stats.len(), 4);
    assert!(r.stats.iter().all(|s| s.throughput_ops == 5_000));
}

#[test]
fn threaded_clients_run_with_background_windows() {
    let mut o = small(2_000, 4);
    o.spec.client_threads = 3;
    o.spec.collector_period_ms = 20;
    o.spec.mix = Mix::A;
    let r = run(&o).unwrap();
    assert_eq!(r.stats.len(), 4);
    assert!(r.summary.ops > 0);
}

#[test]
fn invalid_options_fail_before_load() {
    let mut o = small(10, 1);
    o.spec.active_fraction = 2.0;
    assert!(run(&o).is_err());
    let mut o = small(10, 1);
    o.backend = BackendChoice::SimPressure(0);
    assert!(run(&o).is_err());
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_hades-bench");
    let dir = tempfile::tempdir().unwrap();
    let bad = Command::new(bin)
        .args(["--backend", "sim-swap"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    let bad = Command::new(bin).args(["--records", "0"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("record count"));

    let cfg = dir.path().join("run.conf");
    let csv = dir.path().join("out.csv");
    std::fs::write(
        &cfg,
        format!(
            "records = 1000\nvalue_size = 128\nwindows = 3\nops_per_window = 1000\nclient_threads = 1\nsegment_size = 64K\ncsv = {}\n",
            csv.display()
        ),
    )
    .unwrap();
    let ok = Command::new(bin)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(
        ok.status.success(),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    let summary: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(summary["windows"], 3);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
}
