use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use hades::backend::{Backend, BackendMode, Residency, SimBackend, SimConfig};
use hades::metrics::utilization_of;
use hades::registry::classify;
use hades::{
    AccessSink, Advice, AdviceEvent, AdviceStage, Collector, GuideSlot, GuideWord, HeapConfig,
    HeapId, ObjectId, PolicyConfig, PolicyState, RootSlot, Runtime, RuntimeConfig, SharedBackend,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn guide_round_trip(addr in 0u64..(1 << 48), access: bool, atc in 0u8..=63, tracking: bool, migrating: bool) {
        let w = GuideWord::pack(addr, access, atc, tracking, migrating).unwrap();
        let f = w.unpack();
        prop_assert_eq!((f.address, f.access_bit, f.atc, f.tracking_flag, f.migrating_flag),
                        (addr, access, atc, tracking, migrating));
        prop_assert_eq!(w.raw() >> 57, 0);
    }

    #[test]
    fn utilization_matches_bitmap(spans in prop::collection::vec((0u64..(1 << 20), 1u64..5000), 1..200)) {
        let u = utilization_of(spans.iter().copied(), 4096).unwrap();
        let mut bytes = vec![false; (1 << 20) + 5000];
        for &(a, s) in &spans {
            bytes[a as usize..(a + s) as usize].iter_mut().for_each(|b| *b = true);
        }
        let unique = bytes.iter().filter(|b| **b).count() as u64;
        let pages = bytes.chunks(4096).filter(|c| c.iter().any(|b| *b)).count() as u64;
        prop_assert_eq!(u.unique_bytes, unique);
        prop_assert_eq!(u.unique_pages, pages);
    }

    #[test]
    fn utilization_monotone_and_page_size_bound(
        spans in prop::collection::vec((0u64..(1 << 20), 1u64..3000), 1..100),
        extra in (0u64..(1 << 20), 1u64..3000),
    ) {
        let a = utilization_of(spans.iter().copied(), 4096).unwrap();
        let b = utilization_of(spans.iter().copied().chain([extra]), 4096).unwrap();
        prop_assert!(b.unique_bytes >= a.unique_bytes && b.unique_pages >= a.unique_pages);
        let big = utilization_of(spans.iter().copied(), 8192).unwrap();
        prop_assert!(big.fraction().unwrap() <= a.fraction().unwrap() + 1e-12);
    }
}

/// Independent scalar MIAD reference.
fn reference_controller(signal: &[(u64, u64)]) -> Vec<(u32, bool)> {
    let (mut c, mut proactive, mut streak) = (4.0f64, false, 0);
    let mut out = Vec::new();
    for &(acc, cold) in signal {
        if acc > 0 {
            let rate = cold as f64 / acc as f64;
            if rate > 0.01 {
                c = (c * 2.0).ceil().min(64.0);
                proactive = false;
                streak = 0;
            } else {
                c = (c - 1.0).max(1.0);
                if rate < 0.01 {
                    streak += 1;
                    proactive |= streak >= 3;
                } else {
                    streak = 0;
                }
            }
        }
        out.push((c as u32, proactive));
    }
    out
}

#[test]
fn miad_matches_reference_controller() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let signal: Vec<(u64, u64)> = (0..100)
            .map(|w| {
                let acc = if rng.random_bool(0.05) { 0 } else { 100 };
                let cold = match w % 4 {
                    0 | 1 => rng.random_range(0..4),
                    _ => 0,
                };
                (acc, cold.min(acc))
            })
            .collect();
        let mut p = PolicyState::new(PolicyConfig::default());
        let got: Vec<(u32, bool)> = signal
            .iter()
            .map(|&(a, c)| {
                p.record_counts(a, c);
                let d = p.end_window();
                (d.new_c_t, d.stage == AdviceStage::Proactive)
            })
            .collect();
        assert_eq!(got, reference_controller(&signal));
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
struct RefPage {
    state: u8, // 0 resident, 1 cold listed, 2 swapped
    last: u64,
}

#[test]
fn sim_rss_matches_page_accounting() {
    const SEG: u64 = 64 << 10;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for round in 0..20 {
        let limit = rng.random_range(1..40) * 4096;
        let mode = if round % 2 == 0 {
            BackendMode::CgroupLimit(limit)
        } else {
            BackendMode::AdviceOnly
        };
        let mut sim = SimBackend::new(SimConfig {
            mode,
            ..SimConfig::default()
        });
        let mut model: BTreeMap<u64, RefPage> = BTreeMap::new();
        let mut mapped: Vec<u64> = Vec::new();
        for w in 0..300u64 {
            match rng.random_range(0..10) {
                0 if mapped.len() < 8 => {
                    let base = (rng.random_range(0..64u64)) * SEG;
                    if mapped.contains(&base) {
                        continue;
                    }
                    sim.map_region(base, SEG, w).unwrap();
                    mapped.push(base);
                    for p in 0..SEG / 4096 {
                        model.insert(base + p * 4096, RefPage { state: 0, last: w });
                    }
                }
                1 if !mapped.is_empty() => {
                    let base = mapped.swap_remove(rng.random_range(0..mapped.len()));
                    sim.unmap_region(base, SEG).unwrap();
                    model.retain(|a, _| *a < base || *a >= base + SEG);
                }
                2 | 3 if !mapped.is_empty() => {
                    let base = mapped[rng.random_range(0..mapped.len())];
                    let advice = [Advice::Cold, Advice::Pageout, Advice::Reset, Advice::Huge]
                        [rng.random_range(0..4)];
                    sim.apply_advice(&AdviceEvent {
                        base,
                        length: SEG,
                        advice,
                    })
                    .unwrap();
                    for p in model.range_mut(base..base + SEG).map(|(_, p)| p) {
                        p.state = match (advice, p.state) {
                            (Advice::Cold, 0) => 1,
                            (Advice::Pageout, _) => 2,
                            (Advice::Reset, 1) => 0,
                            (_, s) => s,
                        };
                    }
                }
                4 => {
                    sim.pressure_tick(w);
                    if let BackendMode::CgroupLimit(limit) = mode {
                        let resident = model.values().filter(|p| p.state != 2).count() as u64;
                        let mut excess = resident.saturating_sub(limit / 4096);
                        let mut order: Vec<(bool, u64, u64)> = model
                            .iter()
                            .filter(|(_, p)| p.state != 2)
                            .map(|(a, p)| (p.state != 1, p.last, *a))
                            .collect();
                        order.sort();
                        for (_, _, a) in order {
                            if excess == 0 {
                                break;
                            }
                            model.get_mut(&a).unwrap().state = 2;
                            excess -= 1;
                        }
                    }
                }
                _ if !mapped.is_empty() => {
                    let base = mapped[rng.random_range(0..mapped.len())];
                    let addr = base + rng.random_range(0..SEG - 64);
                    let size = rng.random_range(1..(base + SEG - addr).min(9000));
                    let r = sim.touch(addr, size, w).unwrap();
                    let mut faults = 0;
                    for (_, p) in model.range_mut(addr / 4096 * 4096..addr + size) {
                        faults += (p.state == 2) as u64;
                        p.state = 0;
                        p.last = w;
                    }
                    assert_eq!(r.major_faults, faults);
                }
                _ => {}
            }
            let expected = model.values().filter(|p| p.state != 2).count() as u64 * 4096;
            assert_eq!(sim.rss(), expected, "round {round} window {w}");
            for (a, p) in sim.pages() {
                let m = model[&a];
                let s = match p.residency {
                    Residency::Resident => 0,
                    Residency::ColdListed => 1,
                    Residency::Swapped => 2,
                };
                assert_eq!(s, m.state);
            }
        }
    }
}

/// Brute-force Fig-5 automaton for one object.
#[derive(Clone, Copy, Debug)]
struct RefObject {
    heap: HeapId,
    ciw: u32,
}

#[test]
fn classification_matches_state_machine_replay() {
    let rt = Runtime::new(RuntimeConfig {
        heap: HeapConfig {
            segment_size: 256 << 10,
            region_bytes: 1 << 30,
            ..HeapConfig::default()
        },
        ..RuntimeConfig::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 10_000;
    let objects: Vec<(RootSlot, ObjectId)> = (0..n)
        .map(|_| {
            let addr = rt.allocate(32).unwrap();
            let slot = Arc::new(GuideSlot::new(GuideWord::managed(addr).unwrap()));
            let id = rt.register_root(&slot, 32).unwrap();
            (slot, id)
        })
        .collect();
    let mut reference: HashMap<ObjectId, RefObject> = objects
        .iter()
        .map(|(_, id)| {
            (
                *id,
                RefObject {
                    heap: HeapId::New,
                    ciw: 0,
                },
            )
        })
        .collect();
    let probs: Vec<f64> = (0..n)
        .map(|_| [0.0, 0.05, 0.3, 0.9][rng.random_range(0..4)])
        .collect();
    let mut c = Collector::new(rt.clone(), None);
    for window in 0..50 {
        let c_t = rng.random_range(1..6);
        let mut accessed = vec![false; n];
        for (i, (slot, _)) in objects.iter().enumerate() {
            if rng.random_bool(probs[i]) {
                slot.mark_access();
                accessed[i] = true;
            }
        }
        rt.registry().scan_window();
        let orders = rt.registry().classify_and_schedule(c_t);
        let mut expected = Vec::new();
        for (i, (_, id)) in objects.iter().enumerate() {
            let r = reference.get_mut(id).unwrap();
            r.ciw = if accessed[i] { 0 } else { r.ciw + 1 };
            if let Some(dst) = classify_ref(r.heap, accessed[i], r.ciw, c_t) {
                expected.push((*id, dst));
            }
        }
        let got: Vec<(ObjectId, HeapId)> =
            orders.iter().map(|o| (o.object_id, o.dst_heap)).collect();
        assert_eq!(got, expected, "window {window}");
        c.open_epoch().unwrap();
        let report = c.apply_orders(&orders).unwrap();
        c.close_epoch().unwrap();
        assert_eq!(report.moved as usize, orders.len());
        for (id, dst) in expected {
            reference.get_mut(&id).unwrap().heap = dst;
        }
        for rec in rt.registry().records() {
            let r = reference[&rec.object_id];
            assert_eq!((rec.heap, rec.ciw), (r.heap, r.ciw));
        }
    }
    assert_eq!(rt.registry().len(), n);
}

fn classify_ref(heap: HeapId, accessed: bool, ciw: u32, c_t: u32) -> Option<HeapId> {
    let out = if heap == HeapId::New && accessed {
        Some(HeapId::Hot)
    } else if (heap == HeapId::New || heap == HeapId::Hot) && ciw > c_t {
        Some(HeapId::Cold)
    } else if heap == HeapId::Cold && accessed {
        Some(HeapId::Hot)
    } else {
        None
    };
    assert_eq!(out, classify(heap, accessed, ciw, c_t));
    out
}

struct TouchSink {
    backend: Arc<parking_lot::Mutex<SimBackend>>,
    window: std::sync::atomic::AtomicU64,
}

impl AccessSink for TouchSink {
    fn on_access(&self, rt: &Runtime, address: u64, size: u64, _sampled: bool) {
        let w = self.window.load(std::sync::atomic::Ordering::Relaxed);
        let mut b = self.backend.lock();
        for ev in rt.heaps().drain_region_events() {
            b.apply_region_event(&ev, w).unwrap();
        }
        b.touch(address, size, w).unwrap();
    }
}

#[test]
fn faults_match_promotions_of_paged_out_objects() {
    let sim = Arc::new(parking_lot::Mutex::new(SimBackend::new(
        SimConfig::default(),
    )));
    let sink = Arc::new(TouchSink {
        backend: sim.clone(),
        window: Default::default(),
    });
    let rt = Runtime::with_sink(
        RuntimeConfig {
            heap: HeapConfig {
                segment_size: 64 << 10,
                region_bytes: 1 << 30,
                ..HeapConfig::default()
            },
            policy: PolicyConfig {
                initial_c_t: 1,
                ..PolicyConfig::default()
            },
            sample_every: 1,
        },
        Some(sink.clone()),
    )
    .unwrap();
    let shared: SharedBackend = sim.clone();
    let mut c = Collector::new(rt.clone(), Some(shared));
    // Page-sized objects, so every object owns exactly one page.
    let objects: Vec<(RootSlot, ObjectId)> = (0..512)
        .map(|_| {
            let a = rt.allocate(4096).unwrap();
            assert_eq!(a % 4096, 0);
            let slot = Arc::new(GuideSlot::new(GuideWord::managed(a).unwrap()));
            let id = rt.register_root(&slot, 4096).unwrap();
            (slot, id)
        })
        .collect();
    let index: HashMap<ObjectId, usize> = objects
        .iter()
        .enumerate()
        .map(|(i, (_, id))| (*id, i))
        .collect();
    let set_window = |w| sink.window.store(w, std::sync::atomic::Ordering::Relaxed);
    for w in 0..8 {
        set_window(w);
        for (slot, _) in &objects[..64] {
            drop(rt.enter(slot, 4096));
        }
        c.run_window();
    }
    assert_eq!(c.policy().current_advice_stage(), AdviceStage::Proactive);
    let swapped: Vec<bool> = objects
        .iter()
        .map(|(_, id)| {
            let addr = rt.registry().locate(*id).unwrap().address;
            sim.lock().page(addr).unwrap().residency == Residency::Swapped
        })
        .collect();
    assert!(swapped.iter().filter(|s| **s).count() > 300);

    set_window(8);
    let before = sim.lock().total_faults();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut touched = vec![false; objects.len()];
    for _ in 0..2_000 {
        // Skewed draw: low indices are far more popular.
        let i = ((rng.random::<f64>().powi(3)) * objects.len() as f64) as usize;
        touched[i] = true;
        drop(rt.enter(&objects[i].0, 4096));
    }
    let faults = sim.lock().total_faults() - before;
    let expected = (0..objects.len())
        .filter(|&i| touched[i] && swapped[i])
        .count() as u64;
    assert_eq!(faults, expected);
    let out = c.run_window();
    let promoted = out
        .orders
        .iter()
        .filter(|o| o.dst_heap == HeapId::Hot && swapped[index[&o.object_id]])
        .count() as u64;
    assert_eq!(promoted, faults);
    assert!(out.decision.promotions >= faults);
}
