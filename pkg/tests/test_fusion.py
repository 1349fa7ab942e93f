import numpy as np
import pytest

from relocvo.errors import FusionDeferred, RankDeficiencyError
from relocvo.fusion import (
    FusionConfig,
    FusionGraph,
    FusionNode,
    HistoryEntry,
    MapEdge,
    OdometryEdge,
    OnlineFusion,
    build_local_graph,
    lift,
    optimize_fusion,
    residual_map,
    residual_vo,
    write_fused_tum,
    write_fusion_log,
)
from relocvo.geometry import SE3, Sim3
from relocvo.reloc import RelocResult
from relocvo.solver import gauss_newton_solve


def numeric_jacobian(f, x0, dim=7, eps=1e-6):
    r0 = f(x0)
    J = np.zeros((r0.size, dim))
    for k in range(dim):
        d = np.zeros(dim)
        d[k] = eps
        J[:, k] = (f(x0.retract(d)) - f(x0.retract(-d))) / (2 * eps)
    return J


def rel_err(A, B):
    return np.abs(A - B).max() / max(np.abs(B).max(), 1e-8)


def rand_se3(rng, t=1.0, r=0.5):
    return SE3.exp(np.r_[rng.normal(scale=t, size=3), rng.normal(scale=r, size=3)])


def rand_sim3(rng):
    return Sim3.exp(np.r_[rng.normal(size=3), rng.normal(scale=0.5, size=3), rng.normal(scale=0.3)])


def reloc(frame, pose, refs):
    return RelocResult(frame, pose, [k for k, _ in refs], [n for _, n in refs], max(n for _, n in refs), 0.5)


# --- residuals ---------------------------------------------------------------


def test_vo_residual_zero_when_consistent():
    rng = np.random.default_rng(0)
    T_ij = rand_se3(rng)
    F_i = rand_sim3(rng)
    F_j = lift(T_ij).inverse() @ F_i  # F_j F_i^-1 = (T_ij)^-1
    e, _, _ = residual_vo(T_ij, F_i, F_j)
    assert np.abs(e).max() < 1e-12


def test_map_residual_zero_at_lifted_reloc_pose():
    rng = np.random.default_rng(1)
    for _ in range(20):
        T_hat, M = rand_se3(rng), rand_se3(rng)
        l, _ = residual_map(T_hat, M, lift(T_hat))
        assert np.abs(l).max() < 1e-12


def test_residual_jacobians_finite_differences():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        T_ij, F_i, F_j = rand_se3(rng), rand_sim3(rng), rand_sim3(rng)
        _, Ji, Jj = residual_vo(T_ij, F_i, F_j)
        worst = max(worst, rel_err(Ji, numeric_jacobian(lambda F: residual_vo(T_ij, F, F_j)[0], F_i)))
        worst = max(worst, rel_err(Jj, numeric_jacobian(lambda F: residual_vo(T_ij, F_i, F)[0], F_j)))
        T_hat, M = rand_se3(rng), rand_se3(rng)
        _, J = residual_map(T_hat, M, F_i)
        worst = max(worst, rel_err(J, numeric_jacobian(lambda F: residual_map(T_hat, M, F)[0], F_i)))
    assert worst < 1e-5


def test_edge_error_matches_evaluate():
    rng = np.random.default_rng(3)
    values = {0: rand_sim3(rng), 1: rand_sim3(rng)}
    odo = OdometryEdge(0, 1, rand_se3(rng))
    mp = MapEdge(1, 5, rand_se3(rng), rand_se3(rng), np.eye(7))
    for f in (odo, mp):
        np.testing.assert_allclose(f.error(values), f.evaluate(values)[0], atol=1e-12)


# --- graph construction ------------------------------------------------------


def chain_history(poses, relocs=None, fused=None):
    relocs = relocs or {}
    fused = fused or {}
    return {k: HistoryEntry(T, relocs.get(k), fused.get(k)) for k, T in poses.items()}


def test_two_node_graph_structure():
    hist = chain_history({0: SE3(), 1: SE3(t=[0.5, 0, 0])}, relocs={0: reloc(0, SE3(), [(0, 30)])}, fused={0: Sim3()})
    g = build_local_graph(1, hist, {0: SE3()})
    assert len(g.nodes) == 2 and len(g.odometry_edges) == 1 and len(g.map_edges) == 0
    assert g.nodes[0].fixed and not g.nodes[1].fixed


def test_three_references_give_two_map_edges():
    hist = chain_history(
        {0: SE3(), 1: SE3(t=[0.5, 0, 0])},
        relocs={0: reloc(0, SE3(), [(0, 30)]), 1: reloc(1, SE3(), [(7, 20), (8, 50), (9, 35)])},
        fused={0: Sim3()},
    )
    g = build_local_graph(1, hist, {k: SE3() for k in (0, 7, 8, 9)})
    assert sorted(e.map_id for e in g.map_edges) == [8, 9]


def test_chained_initialization():
    # T^j_i = T_j T_i^-1 is a pure translation (1, 0, 0)
    hist = chain_history({0: SE3(), 1: SE3(t=[1, 0, 0])}, relocs={0: reloc(0, SE3(), [(0, 30)])}, fused={0: Sim3()})
    g = build_local_graph(1, hist, {0: SE3()})
    F = g.nodes[1].pose
    np.testing.assert_allclose(F.t, [1, 0, 0], atol=1e-15)
    assert F.s == 1.0


def test_deferred_without_reference():
    hist = chain_history({0: SE3()})
    with pytest.raises(FusionDeferred):
        build_local_graph(0, hist, {})


def test_span_limits_nodes():
    n = 15
    poses = {k: SE3(t=[-0.3 * k, 0, 0]) for k in range(n)}
    relocs = {k: reloc(k, poses[k], [(k, 30)]) for k in range(n - 1)}
    fused = {k: lift(poses[k]) for k in range(n - 1)}
    g = build_local_graph(n - 1, chain_history(poses, relocs, fused), poses, FusionConfig(span=10))
    assert [nd.id for nd in g.nodes] == list(range(n - 10, n))
    g = build_local_graph(n - 1, chain_history(poses, relocs, fused), poses, FusionConfig(span=10, all_pairs=True))
    assert len(g.odometry_edges) == 45


# --- optimization ------------------------------------------------------------


def straight_line(n, step=0.3):
    return {k: SE3.exp([-step * k, 0.02 * k, 0, 0, 0.01 * k, 0]) for k in range(n)}


def test_perfect_odometry_no_map_edges_keeps_chain():
    poses = straight_line(5)
    hist = chain_history(poses, relocs={k: reloc(k, poses[k], [(k, 30)]) for k in range(4)},
                         fused={k: lift(poses[k]) for k in range(4)})
    g = build_local_graph(4, hist, poses)
    g.map_edges = []
    init = g.values()
    res = optimize_fusion(g)
    for k, F in res.poses.items():
        assert np.abs(F.matrix() - init[k].matrix()).max() < 1e-9


def test_identity_inputs_give_identity():
    hist = chain_history({k: SE3() for k in range(4)}, relocs={k: reloc(k, SE3(), [(k, 30)]) for k in range(4)},
                         fused={k: Sim3() for k in range(3)})
    res = optimize_fusion(build_local_graph(3, hist, {k: SE3() for k in range(4)}))
    for F in res.poses.values():
        assert np.abs(F.matrix() - np.eye(4)).max() < 1e-12


def test_drift_corrected_by_map_edges():
    n = 10
    truth = straight_line(n)
    # each odometry step overshoots by 0.1 m along the direction of travel
    odo = {k: SE3(truth[k].R, truth[k].t + np.array([-0.1 * k, 0, 0])) for k in range(n)}
    relocs = {k: reloc(k, truth[k], [(k, 40)]) for k in range(n)}
    hist = chain_history(odo, relocs, fused={0: lift(truth[0])})
    for k in range(1, n - 1):
        hist[k].fused = lift(truth[k])  # earlier nodes already fused
    g = build_local_graph(n - 1, hist, truth, FusionConfig(span=n))
    res = optimize_fusion(g)
    for k, F in res.poses.items():
        assert np.linalg.norm(F.inverse().t - truth[k].inverse().t) < 5e-3


def test_fixed_nodes_bit_identical_and_energy_monotone():
    rng = np.random.default_rng(4)
    n = 8
    truth = straight_line(n)
    odo = {k: truth[k] @ rand_se3(rng, 0.05, 0.02) for k in range(n)}
    relocs = {k: reloc(k, truth[k] @ rand_se3(rng, 0.02, 0.01), [(k, 40), (k + 1, 30)]) for k in range(n)}
    maps = {k: truth[min(k, n - 1)] for k in range(n + 1)}
    hist = chain_history(odo, relocs, fused={k: lift(truth[k]) for k in range(n - 1)})
    g = build_local_graph(n - 1, hist, maps)
    ref = g.nodes[0].pose
    res = optimize_fusion(g)
    assert res.poses[g.nodes[0].id] is ref
    maps_before = {k: v.matrix().copy() for k, v in maps.items()}
    for e in g.map_edges:
        assert np.array_equal(e.M_k.matrix(), lift(maps[e.map_id]).matrix())
    assert all(np.array_equal(maps[k].matrix(), maps_before[k]) for k in maps)
    out = gauss_newton_solve(g.factors(), g.values(), g.blocks())
    assert all(b <= a for a, b in zip(out.energies, out.energies[1:]))
    assert res.energy <= res.initial_energy


def test_zero_residual_fixpoint():
    truth = straight_line(6)
    relocs = {k: reloc(k, truth[k], [(k, 40)]) for k in range(6)}
    hist = chain_history(truth, relocs, fused={k: lift(truth[k]) for k in range(5)})
    g = build_local_graph(5, hist, truth)
    init = g.values()
    res = optimize_fusion(g)
    assert res.iterations == 0
    for k in init:
        assert np.abs(res.poses[k].matrix() - init[k].matrix()).max() < 1e-9


def test_orphan_node_is_rank_deficient():
    g = FusionGraph([FusionNode(0, Sim3(), True), FusionNode(1, Sim3()), FusionNode(2, Sim3())],
                    [OdometryEdge(0, 1, SE3())], [])
    with pytest.raises(RankDeficiencyError) as exc:
        optimize_fusion(g)
    assert exc.value.blocks == (2,)


def scale_gauge_run(scale, info, n=6):
    truth = straight_line(n)
    relocs = {k: reloc(k, truth[k], [(k, 40)]) for k in range(n)}
    odo = {k: SE3(truth[k].R, scale * truth[k].t) for k in range(n)}
    hist = chain_history(odo, relocs, fused={0: Sim3(s=scale) @ lift(truth[0])})
    for k in range(1, n - 1):
        hist[k].fused = lift(truth[k])
    cfg = FusionConfig(span=n, scale_information=info)
    g = build_local_graph(n - 1, hist, truth, cfg)
    res = optimize_fusion(g, cfg)
    resid = np.concatenate([e.error(res.poses)[:6] for e in g.map_edges])
    return res.poses, resid


def scale_gauge_deviation(info, s=3.0):
    base, r1 = scale_gauge_run(1.0, info)
    scaled, r2 = scale_gauge_run(s, info)
    S = Sim3(s=s)
    dt = max(np.abs(scaled[k].t - (S @ base[k]).t).max() for k in base)
    return dt, np.abs(r1 - r2).max()


@pytest.mark.parametrize("info", [1e-10, 1e-12, 0.0])
def test_scale_gauge_same_sequence(info):
    # queries coincide with map keyframes; scaling odometry and the anchor is absorbed by the Sim(3) scales
    dt, dr = scale_gauge_deviation(info)
    assert dt < 1e-6 and dr < 1e-6


def test_scale_gauge_deviation_is_linear_in_scale_information():
    # the scale row still carries a little information, which pulls the optimum proportionally
    d6, r6 = scale_gauge_deviation(1e-6)
    d8, r8 = scale_gauge_deviation(1e-8)
    assert d6 / d8 == pytest.approx(100, rel=0.01)
    assert r6 / r8 == pytest.approx(100, rel=0.01)


def test_online_matches_batch_when_span_covers_all():
    rng = np.random.default_rng(5)
    n = 12
    truth = straight_line(n)
    odo = {k: truth[k] @ rand_se3(rng, 0.03, 0.01) for k in range(n)}
    relocs = {k: (reloc(k, truth[k] @ rand_se3(rng, 0.02, 0.005), [(k, 40)]) if k % 3 != 1 else None) for k in range(n)}
    cfg = FusionConfig(span=50)
    online = OnlineFusion(truth, cfg)
    for k in range(n):
        online.process(k, odo[k], relocs[k])
    assert sorted(online.fused) == list(range(n))
    hist = {k: HistoryEntry(odo[k], relocs[k], online.fused[k]) for k in range(n - 1)}
    hist[n - 1] = HistoryEntry(odo[n - 1], relocs[n - 1])
    batch = optimize_fusion(build_local_graph(n - 1, hist, truth, cfg), cfg)
    assert np.abs(batch.poses[n - 1].matrix() - online.fused[n - 1].matrix()).max() < 1e-6


def test_online_bootstrap_back_chains_deferred():
    truth = straight_line(5)
    fusion = OnlineFusion(truth)
    assert fusion.process(0, truth[0]) == []
    assert fusion.process(1, truth[1]) == []
    out = fusion.process(2, truth[2], reloc(2, truth[2], [(2, 40)]))
    assert out == [0, 1, 2]
    for k in range(3):
        assert np.abs(fusion.fused[k].matrix() - truth[k].matrix()).max() < 1e-12
    assert fusion.process(3, truth[3]) == [3]


def test_online_without_bootstrap_never_fuses():
    truth = straight_line(3)
    fusion = OnlineFusion(truth, FusionConfig(bootstrap=False))
    for k in range(3):
        fusion.process(k, truth[k], reloc(k, truth[k], [(k, 40)]))
    assert fusion.fused == {} and fusion.deferred == [0, 1, 2]


def test_outputs(tmp_path):
    truth = straight_line(4)
    fusion = OnlineFusion(truth)
    for k in range(4):
        fusion.process(k, truth[k], reloc(k, truth[k], [(k, 40)]))
    write_fused_tum(tmp_path / "fused.txt", fusion.fused)
    lines = (tmp_path / "fused.txt").read_text().splitlines()
    assert len(lines) == 5 and len(lines[1].split()) == 9
    write_fusion_log(tmp_path / "fusion.csv", fusion.log)
    rows = (tmp_path / "fusion.csv").read_text().splitlines()
    assert rows[0] == "keyframe,nodes,map_edges,initial_energy,final_energy,iterations" and len(rows) == 5
