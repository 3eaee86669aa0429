"""Time the propagation kernels, a forward pass and a gradient step per backend.

    python3 benchmarks/bench_kernels.py --users 6000 --items 3500 --per-user 25
"""
import argparse
import time

import numpy as np

from fairrec import kernels, model, train
from fairrec.graph import build_bipartite
from fairrec.synthetic import from_pairs
from fairrec.ingest import split


def _graph(n_users, n_items, per_user, seed):
    rng = np.random.default_rng(seed)
    pairs = np.array([(u, i) for u in range(n_users)
                      for i in rng.choice(n_items, per_user, replace=False)])
    splits = split(from_pairs(pairs, n_users, n_items), seed=seed)
    return build_bipartite(splits.train, n_users, n_items), splits


def _best(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--users", type=int, default=6000)
    ap.add_argument("--items", type=int, default=3500)
    ap.add_argument("--per-user", type=int, default=25)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--interests", type=int, default=4)
    ap.add_argument("--hops", type=int, default=2)
    ap.add_argument("--batch", type=int, default=2048)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args(argv)

    g, splits = _graph(args.users, args.items, args.per_user, 0)
    p = model.init(g.n_nodes, args.dim, args.interests, args.hops, seed=0)
    rng = np.random.default_rng(1)
    x = p.centers
    att = rng.random((g.n_nodes, args.interests))
    ev = kernels.gather_interests(g.indptr, g.indices, att, x)
    _, mid = kernels.select_aggregate(g.indptr, g.indices, g.weights, ev, x)
    dy = rng.standard_normal(x.shape)
    batch = train.sample_triples(splits.train, splits.n_items, args.batch, np.random.default_rng(2))

    cases = {
        "gather_interests": lambda: kernels.gather_interests(g.indptr, g.indices, att, x),
        "neighbor_sum": lambda: kernels.neighbor_sum(g.indptr, g.indices, ev),
        "select_aggregate": lambda: kernels.select_aggregate(g.indptr, g.indices, g.weights, ev, x),
        "scatter_selected": lambda: kernels.scatter_selected(
            g.indptr, g.indices, g.rev, g.weights, mid, dy, args.interests),
        "forward": lambda: model.forward(g, p),
        "gradients": lambda: train.gradients(g, p, batch, 0.001),
    }
    print(f"graph: {g.n_nodes} nodes, {g.n_edges} directed edges; d={args.dim} "
          f"K={args.interests} L={args.hops}")
    results = {}
    for backend in kernels.available_backends():
        kernels.use_backend(backend)
        for name, fn in cases.items():
            fn()  # warm up
            results[backend, name] = _best(fn, args.repeats)
    backends = kernels.available_backends()
    print(f"{'case':<18}" + "".join(f"{b:>12}" for b in backends)
          + ("     speedup" if len(backends) == 2 else ""))
    for name in cases:
        row = f"{name:<18}" + "".join(f"{results[b, name] * 1e3:>10.2f}ms" for b in backends)
        if len(backends) == 2:
            row += f"{results['python', name] / results['cython', name]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
