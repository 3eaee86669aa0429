"""Independent slow reference implementations used as test oracles.

Nothing here imports fairrec; every formula is written out with plain loops.
"""
import itertools
import math
from fractions import Fraction


def neighbours(n_users, edges):
    nb = {}
    for u, i in edges:
        a, b = u, n_users + i
        nb.setdefault(a, set()).add(b)
        nb.setdefault(b, set()).add(a)
    return {v: sorted(s) for v, s in nb.items()}


def cos(a, b):
    na, nb = math.sqrt(sum(x * x for x in a)), math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def ref_forward(n_nodes, n_users, edges, e0, w, temperature, weight=None):
    """Straight-line forward pass; returns (centers per layer, virtuals per layer)."""
    nb = neighbours(n_users, edges)
    deg = {v: len(s) for v, s in nb.items()}
    if weight is None:
        def weight(v, n):
            return 1.0 / math.sqrt(deg[v] * deg[n])
    x = [list(map(float, row)) for row in e0]
    d = len(x[0])
    centers, virtuals = [x], []
    for layer in range(len(w)):
        k_count = len(w[layer])
        att = []
        for n in range(n_nodes):
            logits = [cos(x[n], w[layer][k]) / temperature for k in range(k_count)]
            m = max(logits)
            ex = [math.exp(t - m) for t in logits]
            s = sum(ex)
            att.append([e / s for e in ex])
        ev = [[[0.0] * d for _ in range(k_count)] for _ in range(n_nodes)]
        for v in range(n_nodes):
            for n in nb.get(v, []):
                for k in range(k_count):
                    for j in range(d):
                        ev[v][k][j] += att[n][k] * x[n][j]
        y = [[0.0] * d for _ in range(n_nodes)]
        for v in range(n_nodes):
            for n in nb.get(v, []):
                dots = [dot(ev[n][k], x[v]) for k in range(k_count)]
                mid = dots.index(max(dots))
                c = weight(v, n)
                for j in range(d):
                    y[v][j] += c * ev[n][mid][j]
        virtuals.append(ev)
        x = y
        centers.append(x)
    return centers, virtuals


def ref_relevance(ev, c, u, i_node):
    t1 = max(dot(ev[u][k], c[i_node]) for k in range(len(ev[u])))
    t2 = max(dot(ev[i_node][k], c[u]) for k in range(len(ev[i_node])))
    return t1 + t2


def simpson(items, category_of):
    """Exact probability that two distinct draws differ in category."""
    m = len(items)
    diff = sum(1 for a, b in itertools.permutations(range(m), 2)
               if category_of[items[a]] != category_of[items[b]])
    return Fraction(diff, m * (m - 1))


def d_emb(items, emb):
    m = len(items)
    total = sum(cos(emb[items[a]], emb[items[b]]) for a, b in itertools.permutations(range(m), 2))
    return min(1.0, max(0.0, 1.0 - total / (m * (m - 1))))


def recall(ranked, relevant, k):
    return len(set(ranked[:k]) & set(relevant)) / len(relevant)


def ndcg(ranked, relevant, k):
    rel = set(relevant)
    dcg = sum(1.0 / math.log2(p + 2) for p, it in enumerate(ranked[:k]) if it in rel)
    idcg = sum(1.0 / math.log2(p + 2) for p in range(min(len(rel), k)))
    return dcg / idcg


def alignment(us, its):
    total, n = 0.0, 0
    for a, b in zip(us, its):
        na, nb = math.sqrt(dot(a, a)), math.sqrt(dot(b, b))
        if na == 0 or nb == 0:
            continue
        total += sum((x / na - y / nb) ** 2 for x, y in zip(a, b))
        n += 1
    return total / n


def pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def avg_ranks(a):
    out = []
    for x in a:
        less = sum(1 for y in a if y < x)
        equal = sum(1 for y in a if y == x)
        out.append(less + (equal + 1) / 2.0)
    return out


def spearman(a, b):
    return pearson(avg_ranks(a), avg_ranks(b))


def kendall_a(a, b):
    n = len(a)
    s = 0
    for p, q in itertools.combinations(range(n), 2):
        x = (a[p] > a[q]) - (a[p] < a[q])
        y = (b[p] > b[q]) - (b[p] < b[q])
        s += x * y
    return s / (n * (n - 1) / 2)


def optimal_1d_inertia(x, k):
    """Exact 1-D k-means optimum by dynamic programming over contiguous blocks."""
    x = sorted(x)
    n = len(x)

    def sse(i, j):
        seg = x[i:j]
        m = sum(seg) / len(seg)
        return sum((v - m) ** 2 for v in seg)

    inf = float("inf")
    best = [[inf] * (n + 1) for _ in range(k + 1)]
    best[0][0] = 0.0
    for g in range(1, k + 1):
        for j in range(1, n + 1):
            for i in range(g - 1, j):
                if best[g - 1][i] < inf:
                    best[g][j] = min(best[g][j], best[g - 1][i] + sse(i, j))
    return best[k][n]


def kcore_fixed_point(pairs, min_user, min_item):
    """Iterate user/item degree removal until nothing changes."""
    alive = set(pairs)
    while True:
        ucount, icount = {}, {}
        for u, i in alive:
            ucount[u] = ucount.get(u, 0) + 1
            icount[i] = icount.get(i, 0) + 1
        nxt = {(u, i) for u, i in alive if ucount[u] >= min_user and icount[i] >= min_item}
        if nxt == alive:
            return alive
        alive = nxt
