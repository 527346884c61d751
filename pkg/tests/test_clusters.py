import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from loopsoup import clusters as C
from loopsoup import paths as P
from loopsoup import soup as S
from loopsoup.harmonic import DomainError
from loopsoup.io import read_csv


def _oracle(loops, eps, metric="euclidean"):
    """Canonical labels from all-pairs vertex distances and a graph component search."""
    pts = [np.asarray(getattr(lp, "points", lp), float) for lp in loops]
    if metric == "logpolar":
        pts = [C.logpolar(p) for p in pts]
    n = len(pts)
    adj = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(i + 1, n):
            adj[i, j] = adj[j, i] = cdist(pts[i], pts[j]).min() <= eps
    _, comp = connected_components(csr_matrix(adj), directed=False)
    # canonical: smallest loop id in each component
    first = {c: i for i, c in reversed(list(enumerate(comp)))}
    return np.array([first[c] for c in comp])


def _random_walk_loops(n, seed, scale=1.0, steps=20):
    rng = P.make_rng(seed)
    out = []
    for _ in range(n):
        root = rng.uniform(-1, 1, 3) * scale
        t = rng.uniform(0.005, 0.1) * scale**2
        out.append(P.bridge_vertices(root[None], root[None], [t], steps, rng)[0])
    return out


def _same_partition(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.array_equal(a[:, None] == a[None], b[:, None] == b[None])


def _refines(fine, coarse):
    """Every class of ``fine`` lies inside one class of ``coarse``."""
    fine, coarse = np.asarray(fine), np.asarray(coarse)
    return all(len(set(coarse[fine == f])) == 1 for f in set(fine.tolist()))


# -- union-find ----------------------------------------------------------------------------


@given(st.integers(1, 40), st.lists(st.tuples(st.integers(0, 39), st.integers(0, 39)), max_size=60))
@settings(max_examples=100, deadline=None)
def test_union_find_matches_graph_components(n, edges):
    edges = [(i % n, j % n) for i, j in edges]
    uf = C.UnionFind(n)
    for i, j in edges:
        uf.union(i, j)
    adj = np.zeros((n, n), dtype=bool)
    for i, j in edges:
        adj[i, j] = adj[j, i] = True
    _, comp = connected_components(csr_matrix(adj), directed=False)
    lab = uf.canonical()
    assert _same_partition(lab, comp)
    assert all(lab[i] == np.flatnonzero(lab == lab[i]).min() for i in range(n))


# -- oracle equivalence --------------------------------------------------------------------


def test_labels_match_brute_force_on_random_soups():
    cfg = S.SoupConfig(3.0, ((-0.5,) * 3, (0.5,) * 3), (0.2, 0.6), steps_per_unit=32)
    checked = 0
    for k in range(50):
        soup = S.generate_soup(cfg, P.make_rng(k, P.stream_id("cluster-oracle", 0)))
        loops = soup.loops[:30]
        for eps in (0.02, 0.05, 0.1):
            idx = C.build_index(loops, eps)
            np.testing.assert_array_equal(idx.labels, _oracle(loops, eps))
            np.testing.assert_array_equal(idx.labels, C.brute_force_labels(loops, eps))
        checked += 1
    assert checked == 50


@given(st.integers(2, 25), st.integers(0, 2**20), st.floats(0.01, 0.3), st.sampled_from(C.METRICS))
@settings(max_examples=40, deadline=None)
def test_labels_match_oracle_property(n, seed, eps, metric):
    loops = _random_walk_loops(n, seed)
    idx = C.build_index(loops, eps, metric)
    np.testing.assert_array_equal(idx.labels, _oracle(loops, eps, metric))


@given(st.integers(2, 25), st.integers(0, 2**20), st.floats(0.02, 0.3))
@settings(max_examples=40, deadline=None)
def test_epsilon_monotone_refinement(n, seed, eps):
    loops = _random_walk_loops(n, seed)
    coarse = C.build_index(loops, eps)
    for f in (0.5, 0.25):
        direct = C.build_index(loops, eps * f)
        assert _refines(direct.labels, coarse.labels)
        np.testing.assert_array_equal(coarse.relabel(eps * f).labels, direct.labels)
    with pytest.raises(DomainError):
        coarse.relabel(2 * eps)


@given(st.integers(2, 20), st.integers(0, 2**20), st.floats(0.02, 0.3), st.randoms(use_true_random=False))
@settings(max_examples=40, deadline=None)
def test_labels_are_permutation_invariant(n, seed, eps, rnd):
    loops = _random_walk_loops(n, seed)
    perm = list(range(n))
    rnd.shuffle(perm)
    a = C.build_index(loops, eps).labels
    b = C.build_index([loops[i] for i in perm], eps).labels
    # loop perm[k] sits at position k in the permuted soup
    assert _same_partition(a[perm], b)
    assert all(b[k] == np.flatnonzero(b == b[k]).min() for k in range(n))


@given(st.integers(2, 20), st.integers(0, 2**20), st.floats(0.02, 0.3), st.data())
@settings(max_examples=40, deadline=None)
def test_relabel_subset_matches_fresh_index(n, seed, eps, data):
    loops = _random_walk_loops(n, seed)
    keep = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    sub = C.build_index(loops, eps).relabel(keep=keep)
    assert np.all(sub.labels[~keep] == -1)
    ids = np.flatnonzero(keep)
    if len(ids):
        fresh = C.build_index([loops[i] for i in ids], eps).labels
        assert _same_partition(sub.labels[ids], fresh)


def test_logpolar_is_scale_invariant():
    loops = _random_walk_loops(15, 3)
    a = C.build_index(loops, 0.15, "logpolar").labels
    b = C.build_index([7.0 * p for p in loops], 0.15, "logpolar").labels
    np.testing.assert_array_equal(a, b)


# -- crossing queries ---------------------------------------------------------------------


def _brute_crossing(loops, eps, inner, outer):
    lab = _oracle(loops, eps)
    def touches(p, rad):
        r = np.linalg.norm(p, axis=1)
        return np.any(np.abs(r - rad) <= eps) or np.any((r[1:] <= rad) != (r[:-1] <= rad))
    t_in = {lab[i] for i, p in enumerate(loops) if touches(p, inner)}
    t_out = {lab[i] for i, p in enumerate(loops) if touches(p, outer)}
    return bool(t_in & t_out)


@given(st.integers(1, 25), st.integers(0, 2**20), st.floats(0.02, 0.2), st.floats(0.1, 0.8))
@settings(max_examples=60, deadline=None)
def test_crossing_event_matches_brute_force(n, seed, eps, inner):
    loops = _random_walk_loops(n, seed)
    idx = C.build_index(loops, eps)
    got = C.crossing_event(idx, C.CrossingQuery(inner, 1.0))
    assert got == _brute_crossing(loops, eps, inner, 1.0)
    many = C.crossing_events(idx, [inner, inner / 2])
    assert many[0] == got
    assert many[1] == C.crossing_event(idx, C.CrossingQuery(inner / 2, 1.0))


def test_chain_of_loops_connects_spheres():
    # a chain of tiny loops along the x axis from radius 0.2 to 1.1, spaced below epsilon
    xs = np.arange(0.2, 1.11, 0.05)
    loops = [np.array([[x, 0, 0], [x + 0.01, 0.01, 0], [x, 0, 0]]) for x in xs]
    idx = C.build_index(loops, 0.045)
    assert C.crossing_event(idx, C.CrossingQuery(0.3, 1.0))
    assert C.connected(idx, [0], [len(loops) - 1])
    broken = idx.relabel(keep=np.arange(len(loops)) != len(loops) // 2)
    assert not C.crossing_event(broken, C.CrossingQuery(0.3, 1.0))
    assert not C.crossing_event(C.build_index(loops, 0.03), C.CrossingQuery(0.3, 1.0))


def test_validation_errors():
    loops = _random_walk_loops(3, 1)
    with pytest.raises(DomainError):
        C.build_index(loops, 0.0)
    with pytest.raises(DomainError):
        C.build_index(loops, 0.1, "manhattan")
    with pytest.raises(DomainError):
        C.build_index([np.zeros((3, 3))], 0.1, "logpolar")
    with pytest.raises(DomainError):
        C.CrossingQuery(1.0, 0.5)
    with pytest.raises(DomainError):
        C.CrossingQuery(0.5, 1.0, tol=0.0)
    idx = C.build_index(loops, 0.1, window=((-0.5,) * 3, (0.5,) * 3))
    with pytest.raises(DomainError):
        C.crossing_event(idx, C.CrossingQuery(0.2, 1.0))
    with pytest.raises(DomainError):
        C.crossing_event(C.build_index(loops, 0.1), C.CrossingQuery(0.2, 1.0, center=(1.0, 0, 0)))
    with pytest.raises(DomainError):
        C.connected(idx, [0], [5])


def test_cluster_dump(tmp_path):
    loops = [P.Loop(np.linspace(0, 0.1, 21), p) for p in _random_walk_loops(10, 2)]
    idx = C.build_index(loops, 0.2)
    C.dump_clusters(idx, tmp_path / "c.csv", C.CrossingQuery(0.3, 1.0))
    rows = read_csv(tmp_path / "c.csv")
    assert list(rows[0]) == C.CLUSTER_COLUMNS
    assert [int(r["cluster_label"]) for r in rows] == idx.labels.tolist()
