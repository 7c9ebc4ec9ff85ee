import dataclasses

import numpy as np
import pytest

from alsuv.attack import (
    AttackConfig,
    DegeneratePseudoTargetError,
    LatentBatch,
    NoCandidatesError,
    alsuv_attack,
    attack_loss,
    attack_loss_grad,
    average_trajectory,
    finish_attack,
    latent_init,
    optimize_latents,
    pseudo_target,
    rank_candidates,
    run_adam,
    select_latent,
    seen_similarity,
    serial_baseline,
)
from alsuv.numerics import Layer, Mlp, cosine_similarity, finite_difference_grad, mlp_forward
from alsuv.optimize import AdamState, LrSchedule, adam_step, lr_at


def linear_net(w, normalize=False):
    w = np.asarray(w, dtype=float)
    return Mlp((Layer(w, np.zeros(w.shape[0]), "identity"),), normalize)


def trivial_batch(traj):
    traj = np.asarray(traj, dtype=float)
    return LatentBatch(traj, np.ones(len(traj), bool), AdamState.zeros(traj[:, 0].shape))


@pytest.fixture(scope="module")
def setup(world):
    ens = world.ensemble
    return world.generator, ens.seen, ens.validation, world.targets[0, 0], world


class TestLoss:
    def test_real_latent_is_optimal(self, setup):
        G, E, _, v, world = setup
        assert attack_loss(world.identities.z_real[0], G, E, v) == pytest.approx(-1.0, abs=1e-15)

    def test_bounded(self, setup, rng):
        G, E, _, v, _ = setup
        assert all(attack_loss(z, G, E, v) >= -1 for z in rng.standard_normal((20, G.input_dim)))

    def test_compositional(self, setup, rng):
        G, E, _, v, _ = setup
        z = rng.standard_normal(G.input_dim)
        assert abs(attack_loss(z, G, E, v) + cosine_similarity(mlp_forward(E, mlp_forward(G, z)), v)) <= 1e-15

    def test_grad_vs_fd(self, setup, rng):
        G, E, _, v, _ = setup
        z = rng.standard_normal(G.input_dim)
        fd = finite_difference_grad(lambda x: attack_loss(x, G, E, v), z)
        g = attack_loss_grad(z, G, E, v)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-4

    def test_grad_vanishes_at_linear_optimum(self):
        # G(z) = A z, E(x) = normalize(B x); z* = (BA)^-1 v is a global minimum
        rng = np.random.default_rng(7)
        A, B = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        v = rng.standard_normal(3)
        v /= np.linalg.norm(v)
        z_star = np.linalg.solve(B @ A, v)
        g = attack_loss_grad(z_star, linear_net(A), linear_net(B, normalize=True), v)
        assert np.linalg.norm(g) <= 1e-8

    def test_target_scale_invariant(self, setup, rng):
        G, E, _, v, _ = setup
        z = rng.standard_normal(G.input_dim)
        np.testing.assert_allclose(attack_loss_grad(z, G, E, 2 * v), attack_loss_grad(z, G, E, v),
                                   rtol=1e-12, atol=1e-15)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"n": 0}, {"T0": 0}, {"T0": 101}, {"k_top": 11, "n": 10},
                                    {"init_scale": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            AttackConfig(**kw)

    def test_default_schedule(self):
        assert AttackConfig().schedule == LrSchedule(0.1, 50, 10.0, 100)


class TestOptimize:
    def test_no_steps(self, setup):
        G, E, _, v, _ = setup
        b = optimize_latents(AttackConfig(n=1, T=0, T0=1, k_top=1, seed=3), G, E, v)
        assert b.trajectories.shape == (1, 1, G.input_dim)
        np.testing.assert_array_equal(b.initial[0], latent_init(3, 0, G.input_dim))

    def test_improves_best(self, setup):
        G, E, _, v, _ = setup
        b = optimize_latents(AttackConfig(n=10, seed=1), G, E, v)
        assert seen_similarity(b.final, G, E, v).max() >= seen_similarity(b.initial, G, E, v).max()

    def test_init_independent_of_n(self, setup):
        G, E, _, v, _ = setup
        small = optimize_latents(AttackConfig(n=2, k_top=1, T=3, T0=1, seed=5), G, E, v)
        big = optimize_latents(AttackConfig(n=6, k_top=1, T=3, T0=1, seed=5), G, E, v)
        np.testing.assert_array_equal(small.initial, big.initial[:2])

    def test_batch_independence(self, setup):
        G, E, _, v, _ = setup
        cfg = AttackConfig(n=5, T=20, T0=5, k_top=2, seed=9)
        batch = optimize_latents(cfg, G, E, v)
        for i in range(5):
            z0 = latent_init(9, i, G.input_dim)[None]
            alone = run_adam(z0, G, E, v, 20, lambda t: lr_at(cfg.schedule, t))
            np.testing.assert_allclose(alone.trajectories[0], batch.trajectories[i], rtol=0, atol=1e-12)

    def test_all_diverged(self, setup):
        G, E, _, v, _ = setup
        def lr_fn(t):
            return 0.1
        # an encoder whose output is identically zero never has a finite gradient
        dead = Mlp((Layer(np.zeros((v.size, G.output_dim)), np.zeros(v.size), "identity"),), True)
        with pytest.raises(NoCandidatesError, match="no candidates"):
            run_adam(np.zeros((2, G.input_dim)), G, dead, v, 3, lr_fn)


class TestAveraging:
    def test_window_of_one(self, rng):
        traj = rng.standard_normal((3, 6, 2))
        np.testing.assert_array_equal(average_trajectory(trivial_batch(traj), 1), traj[:, -1])

    def test_constant(self):
        traj = np.tile([[1.5, -2.0]], (1, 5, 1))
        np.testing.assert_array_equal(average_trajectory(trivial_batch(traj), 4), [[1.5, -2.0]])

    def test_mean(self):
        np.testing.assert_array_equal(average_trajectory(trivial_batch([[[0.0], [2.0]]]), 2), [[1.0]])

    def test_last_t0_only(self):
        traj = np.arange(6, dtype=float).reshape(1, 6, 1)
        assert average_trajectory(trivial_batch(traj), 3)[0, 0] == 4.0

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            average_trajectory(trivial_batch(np.zeros((1, 3, 1))), 4)


class TestRanking:
    @pytest.fixture
    def toy(self):
        # G = identity on R^2, E = normalize, v = e1: similarity is cos(angle to e1)
        return linear_net(np.eye(2)), linear_net(np.eye(2), normalize=True), np.array([1.0, 0.0])

    def test_single(self, toy):
        assert rank_candidates(np.array([[1.0, 1.0]]), *toy) == [0]

    def test_order(self, toy):
        zs = np.array([[0.9, np.sqrt(1 - 0.81)], [0.5, np.sqrt(0.75)]])
        assert rank_candidates(zs, *toy) == [0, 1]
        assert rank_candidates(zs[::-1], *toy) == [1, 0]

    def test_ties_by_index(self, toy):
        zs = np.array([[1.0, 1.0], [1.0, -1.0], [2.0, 2.0]])
        assert rank_candidates(zs, *toy) == [0, 1, 2]

    def test_shuffle_oracle(self, setup, rng):
        G, E, _, v, _ = setup
        zs = rng.standard_normal((12, G.input_dim))
        perm = rng.permutation(12)
        s1 = seen_similarity(zs[rank_candidates(zs, G, E, v)], G, E, v)
        s2 = seen_similarity(zs[perm][rank_candidates(zs[perm], G, E, v)], G, E, v)
        np.testing.assert_array_equal(s1, s2)
        assert np.all(np.diff(s1) <= 0)

    def test_skips_dead(self, toy):
        zs = np.array([[1.0, 0.0], [1.0, 1.0]])
        assert rank_candidates(zs, *toy, alive=np.array([False, True])) == [1]


class TestPseudoTarget:
    def test_k1(self, setup, rng):
        G, _, Ev, _, _ = setup
        zs = rng.standard_normal((4, G.input_dim))
        np.testing.assert_array_equal(pseudo_target(zs, G, Ev, 1), mlp_forward(Ev, mlp_forward(G, zs[0])))

    def test_identical_candidates(self, setup, rng):
        G, _, Ev, _, _ = setup
        zs = np.tile(rng.standard_normal(G.input_dim), (3, 1))
        np.testing.assert_allclose(pseudo_target(zs, G, Ev, 3), mlp_forward(Ev, mlp_forward(G, zs[0])),
                                   atol=1e-15)

    def test_plain_mean(self):
        ident = linear_net(np.eye(2))
        np.testing.assert_array_equal(pseudo_target(np.array([[1.0, 0.0], [0.0, 1.0]]), ident, ident, 2),
                                      [0.5, 0.5])

    def test_degenerate(self):
        ident = linear_net(np.eye(2))
        with pytest.raises(DegeneratePseudoTargetError, match="degenerate pseudo target"):
            pseudo_target(np.array([[1.0, 0.0], [-1.0, 0.0]]), ident, ident, 2)

    def test_k_too_large(self):
        ident = linear_net(np.eye(2))
        with pytest.raises(ValueError):
            pseudo_target(np.ones((1, 2)), ident, ident, 2)


class TestSelect:
    def test_singleton(self, setup, rng):
        G, _, Ev, _, _ = setup
        zs = rng.standard_normal((5, G.input_dim))
        assert select_latent(zs, G, Ev, rng.standard_normal(Ev.output_dim), 1) == 0

    def test_same_objective_as_ranking(self, setup, rng):
        G, E, _, v, _ = setup
        zs = rng.standard_normal((8, G.input_dim))
        ranked = zs[rank_candidates(zs, G, E, v)]
        assert select_latent(ranked, G, E, v, 8) == 0

    def test_tie_lower_rank(self):
        ident = linear_net(np.eye(2))
        zs = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
        assert select_latent(zs, ident, ident, np.array([1.0, 0.0]), 3) == 1


class TestAlsuv:
    def test_reduction_identity(self, setup):
        G, E, Ev, v, _ = setup
        cfg = AttackConfig(n=1, T0=1, k_top=1, seed=4)
        out = alsuv_attack(cfg, G, E, Ev, v)
        state, z = AdamState.zeros(G.input_dim), latent_init(4, 0, G.input_dim)
        for t in range(cfg.T):
            state, z = adam_step(state, z, attack_loss_grad(z[None], G, E, v)[0], lr_at(cfg.schedule, t))
        np.testing.assert_array_equal(out.z_star, z)

    def test_selection_in_top_k(self, setup, world):
        G, E, Ev, _, _ = setup
        for i in range(5):
            out = alsuv_attack(AttackConfig(n=30, seed=i), G, E, Ev, world.targets[i, 0])
            assert out.selected_rank < out.k_top
            assert out.selected_index == out.ranking[out.selected_rank]
            assert np.all(np.diff(out.seen_sims) <= 0)

    def test_deterministic(self, setup):
        G, E, Ev, v, _ = setup
        a = alsuv_attack(AttackConfig(n=8, k_top=3, seed=2), G, E, Ev, v)
        b = alsuv_attack(AttackConfig(n=8, k_top=3, seed=2), G, E, Ev, v)
        assert a.to_dict() == b.to_dict()

    def test_scale_invariant_decisions(self, setup):
        G, E, Ev, v, _ = setup
        a = alsuv_attack(AttackConfig(n=8, k_top=3, seed=2), G, E, Ev, v)
        b = alsuv_attack(AttackConfig(n=8, k_top=3, seed=2), G, E, Ev, 3.0 * v)
        assert a.ranking == b.ranking and a.selected_index == b.selected_index

    def test_mechanisms_off(self, setup):
        G, E, Ev, v, _ = setup
        cfg = AttackConfig(n=6, k_top=3, seed=1)
        batch = optimize_latents(cfg, G, E, v)
        plain = finish_attack(batch, dataclasses.replace(cfg, averaging=False, validation=False),
                              G, E, Ev, v)
        assert plain.selected_rank == 0 and plain.pseudo_target is None
        np.testing.assert_array_equal(plain.z_star, batch.final[plain.ranking[0]])

    def test_k_top_shrinks(self, setup):
        G, E, Ev, v, _ = setup
        batch = optimize_latents(AttackConfig(n=3, k_top=3, T=2, T0=1, seed=0), G, E, v)
        batch.alive[1:] = False
        with pytest.warns(UserWarning, match="k_top"):
            out = finish_attack(batch, AttackConfig(n=3, k_top=3, T=2, T0=1), G, E, Ev, v)
        assert out.k_top == 1 and out.ranking == [0]

    def test_beats_single_latent_on_unseen(self, world):
        from alsuv.harness import attacker_view, run_attack, unseen_similarity
        full, single = [], []
        for i in range(50):
            view = attacker_view(world, i)
            full.append(unseen_similarity(world, i, run_attack(view, AttackConfig(seed=i)).x_star))
            one = run_attack(view, AttackConfig(n=1, k_top=1, seed=i))
            single.append(unseen_similarity(world, i, one.x_star))
        assert np.mean(full) > np.mean(single)


class TestSerial:
    def test_full_period_is_standard(self, setup):
        G, E, Ev, v, _ = setup
        cfg = AttackConfig(n=1, k_top=1, T0=1, seed=3)
        a = serial_baseline(cfg, G, E, v, total_steps=100, period=100)
        b = alsuv_attack(cfg, G, E, Ev, v)
        np.testing.assert_array_equal(a.z_star, b.z_star)

    def test_deterministic(self, setup):
        G, E, _, v, _ = setup
        cfg = AttackConfig(n=1, k_top=1, seed=3)
        np.testing.assert_array_equal(serial_baseline(cfg, G, E, v, 300).z_star,
                                      serial_baseline(cfg, G, E, v, 300).z_star)
