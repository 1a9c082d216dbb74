use iagcn::grad::{finite_diff_check, grid_fixture, pick_triplet};
use iagcn::graph::TreePolicy;
use iagcn::model::{BetaMode, GuideMode, Hyperparams, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let (_, graph) = grid_fixture(30).unwrap();
    let triplet = pick_triplet(&graph);
    for (mode, k, eps) in [
        (GuideMode::Interactive, 3usize, 1e-6f64),
        (GuideMode::Interactive, 3, 1e-5),
        (GuideMode::SelfGuided, 3, 1e-6),
        (GuideMode::LightGcnNorm, 3, 1e-6),
    ] {
        let hp = Hyperparams {
            dim: 8, num_layers: k, tau: 1.0, guide_mode: mode,
            beta_mode: BetaMode::Learned, l2_lambda: 1e-4, learning_rate: 1e-3,
        };
        let model = Model::init(hp, graph.num_users(), graph.num_items(), 30 ^ 0x9e3779b9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(30 + k as u64);
        let err = finite_diff_check(&model, &graph, triplet, &TreePolicy::full(), eps, &mut rng).unwrap();
        println!("{mode:?} K={k} eps={eps:.0e} err={err:.3e}");
    }
}
