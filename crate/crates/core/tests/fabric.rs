use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vbt::fabric::Fabric;
use vbt::vdev::{self, Runtime, RuntimeConfig};
use vbt::{Device, Tensor};

fn fabric(n: usize) -> Fabric {
    let rt = Runtime::new(RuntimeConfig { num_devices: n, ..RuntimeConfig::default() });
    let f = Fabric::new(rt);
    f.enable_all_peers().unwrap();
    f
}

fn upload<T: vbt::dtype::Element>(rt: &Arc<Runtime>, data: &[Vec<T>]) -> Vec<Tensor> {
    vdev::with_runtime(rt, || data.iter().enumerate().map(|(d, v)| Tensor::from_vec(v.clone(), &[v.len()], Device::Virt(d)).unwrap()).collect())
}

#[test]
fn i64_exact_for_every_world_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 2..=5 {
        for elems in [1, n - 1, n, n + 1, 7, 64, 1001] {
            let f = fabric(n);
            let data: Vec<Vec<i64>> = (0..n).map(|_| (0..elems).map(|_| rng.gen_range(-1_000_000..1_000_000)).collect()).collect();
            let oracle: Vec<i64> = (0..elems).map(|i| data.iter().map(|v| v[i]).sum()).collect();
            let bufs = upload(f.runtime(), &data);
            f.ring_allreduce(&bufs).unwrap();
            for b in &bufs {
                assert_eq!(b.to_vec::<i64>().unwrap(), oracle, "n={n} e={elems}");
            }
        }
    }
}

#[test]
fn f64_within_tolerance_and_bitwise_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for n in 2..=5 {
        for elems in [7, 1024, 999] {
            let data: Vec<Vec<f64>> = (0..n).map(|_| (0..elems).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let oracle: Vec<f64> = (0..elems).map(|i| data.iter().map(|v| v[i]).sum()).collect();
            let mut first: Option<Vec<f64>> = None;
            for seed in [0, 5, 9] {
                let f = fabric(n);
                f.runtime().set_scheduler_seed(seed);
                let bufs = upload(f.runtime(), &data);
                f.ring_allreduce(&bufs).unwrap();
                let r0 = bufs[0].to_f64_vec().unwrap();
                for b in &bufs {
                    let v = b.to_f64_vec().unwrap();
                    for (x, y) in v.iter().zip(&oracle) {
                        assert!((x - y).abs() <= 1e-12, "n={n}: {x} vs {y}");
                    }
                    assert_eq!(v, r0, "ranks disagree");
                }
                match &first {
                    None => first = Some(r0),
                    Some(p) => assert_eq!(&r0, p, "not bitwise repeatable"),
                }
            }
        }
    }
}

#[test]
fn uneven_chunks() {
    let f = fabric(3);
    let plan = vbt::fabric::RingPlan::new(3, 7).unwrap();
    let sizes: Vec<usize> = (0..3).map(|c| plan.chunk_len(c)).collect();
    assert_eq!(sizes, vec![3, 2, 2]);
    let data: Vec<Vec<i64>> = (0..3).map(|r| (0..7).map(|i| (r * 10 + i) as i64).collect()).collect();
    let bufs = upload(f.runtime(), &data);
    f.ring_allreduce(&bufs).unwrap();
    let want: Vec<i64> = (0..7).map(|i| 30 + 3 * i).collect();
    for b in &bufs {
        assert_eq!(b.to_vec::<i64>().unwrap(), want);
    }
}

#[test]
fn two_n_minus_one_steps_per_rank() {
    for n in 2..=5 {
        let f = fabric(n);
        let rt = f.runtime().clone();
        let data: Vec<Vec<f64>> = (0..n).map(|r| vec![r as f64; 3 * n + 2]).collect();
        let bufs = upload(&rt, &data);
        rt.synchronize_all().unwrap();
        rt.set_trace(true);
        f.ring_allreduce(&bufs).unwrap();
        rt.synchronize_all().unwrap();
        let trace = rt.trace();
        for d in 0..n {
            let copies = trace.iter().filter(|t| t.device == d && t.label.contains("copy_p2p")).count();
            assert_eq!(copies, 2 * (n - 1), "n={n} rank {d}");
            let reduces = trace.iter().filter(|t| t.device == d && t.label.ends_with("allreduce_sum")).count();
            assert_eq!(reduces, n - 1);
        }
        for s in 0..n {
            let l = f.link_stats(s, (s + 1) % n);
            assert_eq!(l.transfers as usize, 2 * (n - 1));
        }
    }
}

#[test]
fn no_hazards_under_100_seeds() {
    for seed in 0..100u64 {
        let n = 2 + (seed as usize % 4);
        let f = fabric(n);
        let rt = f.runtime().clone();
        rt.hazard_check_mode(true);
        rt.set_scheduler_seed(seed);
        let data: Vec<Vec<f64>> = (0..n).map(|r| (0..37).map(|i| (r * 37 + i) as f64).collect()).collect();
        let bufs = upload(&rt, &data);
        f.ring_allreduce(&bufs).unwrap();
        // follow-up writes on each rank must be ordered after the neighbour's reads
        for b in &bufs {
            vbt::ops::fill_(b, 0.0).unwrap();
        }
        rt.synchronize_all().unwrap();
        assert!(rt.hazard_reports().is_empty(), "seed {seed}: {}", rt.hazard_reports_json());
    }
}

#[test]
fn snapshot_counts_link_bytes() {
    let f = fabric(2);
    let fresh: serde_json::Value = serde_json::from_str(&f.snapshot().to_json()).unwrap();
    assert_eq!(fresh["completed_collectives"], 0);
    assert_eq!(fresh["in_flight_events"], 0);
    assert_eq!(fresh["links"].as_array().unwrap().len(), 0);
    assert_eq!(fresh["peer_matrix"], serde_json::json!([[true, true], [true, true]]));
    let data: Vec<Vec<f64>> = (0..2).map(|_| vec![1.0; 1024]).collect();
    let bufs = upload(f.runtime(), &data);
    f.ring_allreduce(&bufs).unwrap();
    f.runtime().synchronize_all().unwrap();
    let s: serde_json::Value = serde_json::from_str(&f.snapshot().to_json()).unwrap();
    let links = s["links"].as_array().unwrap();
    assert_eq!(links.len(), 2);
    for l in links {
        assert_eq!(l["bytes_sent"], 2 * (1024 / 2) * 8);
    }
    assert_eq!(s["completed_collectives"], 1);
    assert_eq!(s["world_size"], 2);
}
