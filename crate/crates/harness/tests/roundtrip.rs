use proptest::prelude::*;
use steerlab::policy::{trajectory, SourceTag};
use steerlab::steerability::{Cell, EvalConfig, PairScr, SourceMatrix, SteerReport};
use steerlab::worldsim::World;
use steerlab_harness::config::parse;
use steerlab_harness::store::{load_trajectories, read_json, save_trajectories, write_json, TrajectoryHeader};
use steerlab_harness::RunConfig;

fn config() -> impl Strategy<Value = RunConfig> {
    (
        any::<u64>(),
        1usize..20,
        0.0f64..20.0,
        1usize..100,
        prop::collection::vec(0.0f64..10.0, 1..5),
        (0.5f64..100.0, any::<u64>(), any::<u64>()),
    )
        .prop_map(|(seed, n_repeat, lambda, budget, lambdas, (tick_hz, eval_seed, cmi_seed))| {
            let mut c = RunConfig::default();
            c.seed = seed;
            c.eval.n_repeat = n_repeat;
            c.eval.seed = eval_seed;
            c.cmi.seed = cmi_seed;
            c.policy.lambda = lambda;
            c.steergen.budget = budget;
            c.experiment.lambdas = lambdas;
            c.serve.tick_hz = tick_hz;
            c
        })
}

fn steer_report() -> impl Strategy<Value = SteerReport> {
    (prop::collection::vec(0usize..11, 6), any::<u64>()).prop_map(|(cells, seed)| {
        let cells: Vec<Cell> = cells.into_iter().map(|s| Cell { successes: s, n: 10 }).collect();
        let matrices = (0..2)
            .map(|i| SourceMatrix {
                source: i,
                targets: vec![1 - i],
                steps: vec![0, 50, 100],
                cells: vec![cells[3 * i..3 * i + 3].to_vec()],
                rollouts: 30,
            })
            .collect::<Vec<_>>();
        let score = matrices.iter().map(SourceMatrix::score).sum::<f64>() / 2.0;
        SteerReport {
            matrices,
            scr: vec![PairScr { i: 0, j: 1, scr: Some(score / 3.0) }, PairScr { i: 1, j: 0, scr: None }],
            score,
            rollouts: 60,
            config: EvalConfig { seed, ..EvalConfig::default() },
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn configs_round_trip_through_toml(c in config()) {
        prop_assert_eq!(parse(&c.to_toml(), None).unwrap(), c);
    }

    #[test]
    fn sub_seeds_never_collide(c in config()) {
        let s = c.seeds();
        let mut all = vec![s.demos, s.eval, s.cmi, s.steergen, s.refine, s.serve];
        all.extend((0..4).map(|k| c.experiment_seed(k)));
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n);
    }

    #[test]
    fn reports_round_trip_through_json(r in steer_report()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        write_json(&p, &r).unwrap();
        prop_assert_eq!(read_json::<SteerReport>(&p).unwrap(), r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn trajectories_round_trip_through_jsonl(seed in any::<u64>(), per_task in 1usize..3) {
        let w = World::default();
        let cfg = trajectory::DemoConfig { per_task, ..Default::default() };
        let demos = trajectory::expert_demos(&w.scene, &w.tasks, &cfg, seed);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let header = TrajectoryHeader::new(&w.scene, &cfg, SourceTag::Demo, seed, &demos);
        save_trajectories(&p, &header, &demos).unwrap();
        let (h, back) = load_trajectories(&p).unwrap();
        prop_assert_eq!(h, header);
        prop_assert_eq!(back, demos);
    }
}
