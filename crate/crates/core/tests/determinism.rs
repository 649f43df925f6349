use fedlm::harness::{run, run_fpld_point, ExperimentId, ExperimentSpec, FpldPoint};
use fedlm::quant::DitherMode;

fn small(id: ExperimentId) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(id, false);
    spec.seeds = 3;
    spec.e1.sweep_k = vec![1, 4];
    spec.e1.sweep_n = vec![1_000];
    spec.e1.sweep_m = vec![200];
    spec.e1.sweep_bits = vec![3];
    spec.e1.sweep_vocab = vec![32];
    spec.e1.vocab = 32;
    spec.e2.vocab = 32;
    spec.e2.n_test = 50;
    spec.e2.fmax_samples = 1_000;
    spec.e2.sweep_n_cal = vec![200];
    spec.e2.sweep_grid_bits = vec![4];
    spec.e2.sweep_score_bits = vec![2, 8];
    spec
}

fn json_without_wall_time(spec: &ExperimentSpec) -> String {
    let mut r = run(spec).unwrap();
    r.wall_time_secs = 0.0;
    r.to_json().unwrap()
}

#[test]
fn identical_specs_give_identical_json() {
    for id in [ExperimentId::E1, ExperimentId::E2] {
        let spec = small(id);
        assert_eq!(json_without_wall_time(&spec), json_without_wall_time(&spec));
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let spec = small(ExperimentId::E2);
    let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let wide = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = serial.install(|| json_without_wall_time(&spec));
    let b = wide.install(|| json_without_wall_time(&spec));
    assert_eq!(a, b);
}

#[test]
fn a_seed_gives_the_same_result_alone_or_in_a_batch() {
    let mut spec = small(ExperimentId::E2);
    let batch = run(&spec).unwrap();
    spec.seeds = 1;
    let alone = run(&spec).unwrap();
    for (sa, sb) in alone.sweeps.iter().zip(&batch.sweeps) {
        for (pa, pb) in sa.points.iter().zip(&sb.points) {
            for (name, stat) in &pa.metrics {
                if name == "f_max" {
                    // Pooled as a maximum over seeds.
                    continue;
                }
                assert_eq!(stat.per_seed[0], pb.metrics[name].per_seed[0], "{name}");
            }
        }
    }

    let point = FpldPoint {
        k: 3,
        n: 400,
        m: 100,
        bits: 5,
        vocab: 16,
        clip: 20.0,
        beta: 0.5,
        rounds: 2,
        mode: DitherMode::DitheredIid,
        drift: 0.3,
    };
    let five = run_fpld_point(&point, 5, 77, ExperimentId::E1_5).unwrap();
    let two = run_fpld_point(&point, 2, 77, ExperimentId::E1_5).unwrap();
    assert_eq!(&five[..2], &two[..]);
}

#[test]
fn different_master_seeds_differ() {
    let a = small(ExperimentId::E1);
    let mut b = a.clone();
    b.master_seed += 1;
    let (ra, rb) = (run(&a).unwrap(), run(&b).unwrap());
    assert_ne!(
        ra.sweeps[0].points[0].metrics["kl"].per_seed,
        rb.sweeps[0].points[0].metrics["kl"].per_seed
    );
}
