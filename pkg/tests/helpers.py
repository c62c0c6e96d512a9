"""Shared test utilities: independent oracles and synthetic data.

Everything here recomputes results from first principles (pure-python loops,
law of cosines, finite differences) so the production code path is never its
own referee.
"""

from __future__ import annotations

import math

import numpy as np

from hmgnet import autodiff as ad
from hmgnet.graph import CompositionVocab, build_hmg, build_molecular_graph
from hmgnet.featurize import FeatureBanks, featurize_hmg
from hmgnet.ingest import Molecule

QM9_ELEMENTS = (1, 6, 7, 8, 9)


# ---------------------------------------------------------------------------
# Synthetic molecules


def random_molecule(rng, n_min=2, n_max=7, elements=QM9_ELEMENTS,
                    box=2.5, min_dist=0.75, id_=""):
    """Random atom cloud with a lower bound on interatomic distances."""
    n = int(rng.integers(n_min, n_max + 1))
    numbers = rng.choice(elements, size=n)
    positions = np.zeros((n, 3))
    for i in range(1, n):
        for _ in range(200):
            cand = rng.uniform(-box, box, 3)
            d = np.linalg.norm(positions[:i] - cand, axis=1)
            if d.min() > min_dist:
                positions[i] = cand
                break
        else:
            raise RuntimeError("could not place atom")
    return Molecule(numbers, positions, {}, id=id_ or f"rand{rng.integers(1e9)}")


def synthetic_energy(mol: Molecule) -> float:
    """Deterministic structure-dependent scalar used as a learnable target:
    per-element constants plus a smooth pairwise term."""
    per_element = {1: -0.5, 6: -38.0, 7: -54.5, 8: -75.0, 9: -99.7}
    e = sum(per_element[int(z)] for z in mol.atomic_numbers)
    n = mol.n_atoms
    for i in range(n):
        for j in range(i + 1, n):
            d = float(np.linalg.norm(mol.positions[i] - mol.positions[j]))
            zi, zj = int(mol.atomic_numbers[i]), int(mol.atomic_numbers[j])
            e += 0.1 * (zi * zj) ** 0.25 * math.exp(-0.8 * d) * math.cos(1.7 * d)
    return e


def synthetic_dataset(rng, n_molecules, target="u0", **kwargs):
    mols = []
    for k in range(n_molecules):
        mol = random_molecule(rng, id_=f"syn{k}", **kwargs)
        mol.targets[target] = synthetic_energy(mol)
        mols.append(mol)
    return mols


def random_rigid_motion(rng):
    """Proper rotation (det +1) plus translation."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    t = rng.uniform(-5, 5, 3)
    return q, t


def apply_rigid_motion(mol: Molecule, q, t) -> Molecule:
    return Molecule(mol.atomic_numbers.copy(), mol.positions @ q.T + t,
                    dict(mol.targets), id=mol.id)


def permute_molecule(mol: Molecule, perm) -> Molecule:
    perm = np.asarray(perm)
    return Molecule(mol.atomic_numbers[perm], mol.positions[perm],
                    dict(mol.targets), id=mol.id)


def hmg_and_features(mol, cutoff, vocab=None, k=8):
    vocab = vocab if vocab is not None else CompositionVocab()
    hmg = build_hmg(build_molecular_graph(mol, cutoff), mol, vocab)
    banks = FeatureBanks.for_cutoff(cutoff, k=k)
    return hmg, featurize_hmg(hmg, banks), vocab


def batch_features(feats_list):
    from hmgnet.featurize import HmgFeatures
    return HmgFeatures(
        e11=np.concatenate([f.e11 for f in feats_list]),
        x2=np.concatenate([f.x2 for f in feats_list]),
        e22=np.concatenate([f.e22 for f in feats_list]),
    )


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle


def fd_gradient(loss_fn, array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. an array that
    the function reads in place."""
    grad = np.zeros_like(array)
    flat, gflat = array.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a-b| / max(1, |a|, |b|), elementwise (unit-floored denominator)."""
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float((np.abs(a - b) / denom).max())


def gradcheck(build_loss, params, names=None, h=1e-5):
    """Compare autodiff gradients of ``build_loss()`` against central finite
    differences for every named parameter; returns the worst relative error."""
    loss = build_loss()
    for p in params.params.values():
        p.grad = None
    ad.backward(loss)
    autodiff_grads = {name: params.grad_of(name).copy()
                      for name in (names or params.names())}
    worst = 0.0
    for name in autodiff_grads:
        fd = fd_gradient(lambda: float(build_loss().data),
                         params[name].data, h=h)
        worst = max(worst, max_rel_error(autodiff_grads[name], fd))
    return worst


# ---------------------------------------------------------------------------
# Scalar network oracle (pure python, no numpy in the arithmetic)


def _ssp(x: float) -> float:
    if x > 30:
        return x + math.log(0.5 * (1.0 + math.exp(-x)))
    return math.log(0.5 * math.exp(x) + 0.5)


def _linear_row(w, b, x):
    cols = len(b)
    return [sum(x[j] * w[j][k] for j in range(len(x))) + b[k] for k in range(cols)]


def _matvec_col(z, a):
    return sum(z[j] * a[j][0] for j in range(len(z)))


class ScalarOracle:
    """Pure-python reimplementation of the network equations for tiny graphs.

    Reads parameter values out of a ParameterStore but shares no forward
    code with the production path.
    """

    def __init__(self, params, config):
        self.p = {name: t.data.tolist() for name, t in params.params.items()}
        self.bn = params.bn_states["fusion.bn"]
        self.config = config

    def input_states(self, hmg, feats):
        p, cfg = self.p, self.config
        h1 = []
        for i in range(hmg.n_atoms):
            e = p["embed.1"][int(hmg.comp1[i])]
            row = _linear_row(p["input.1.w"], p["input.1.b"], e)
            h1.append([_ssp(v) for v in row])
        h2 = []
        if cfg.use_order_2:
            for i in range(hmg.n_pairs):
                e = p["embed.2"][int(hmg.comp2[i])] + list(feats.x2[i])
                row = _linear_row(p["input.2.w"], p["input.2.b"], e)
                h2.append([_ssp(v) for v in row])
        return h1, h2

    def message_same(self, h, edge_feat, src, dst, n_nodes, g, w, b):
        f = self.config.n_feat
        out = [[0.0] * f for _ in range(n_nodes)]
        for e in range(len(src)):
            filt = [sum(edge_feat[e][j] * g[j][k] for j in range(len(g)))
                    for k in range(f)]
            lin = _linear_row(w, b, h[int(src[e])])
            for k in range(f):
                out[int(dst[e])][k] += filt[k] * _ssp(lin[k])
        return out

    def message_cross(self, h_src, src_idx, dst_idx, n_dst, w, b):
        f = self.config.n_feat
        out = [[0.0] * f for _ in range(n_dst)]
        for e in range(len(src_idx)):
            lin = _linear_row(w, b, h_src[int(src_idx[e])])
            for k in range(f):
                out[int(dst_idx[e])][k] += _ssp(lin[k])
        return out

    def node_update(self, h, messages, w, b):
        out = []
        for i in range(len(h)):
            x = list(h[i])
            for m in messages:
                x += m[i]
            row = _linear_row(w, b, x)
            out.append([h[i][k] + _ssp(row[k]) for k in range(len(h[i]))])
        return out

    def refine(self, h, w, b):
        return [[h[i][k] + _ssp(v) for k, v in enumerate(_linear_row(w, b, h[i]))]
                for i in range(len(h))]

    def interaction(self, hmg, feats, h1, h2, t):
        p, cfg = self.p, self.config
        f = cfg.n_feat
        m11 = self.message_same(h1, feats.e11.tolist(), hmg.e11_src, hmg.e11_dst,
                                hmg.n_atoms, p[f"inter.{t}.same.1.g"],
                                p[f"inter.{t}.same.1.w"], p[f"inter.{t}.same.1.b"])
        if cfg.use_order_2:
            m22 = self.message_same(h2, feats.e22.tolist(), hmg.e22_src,
                                    hmg.e22_dst, hmg.n_pairs,
                                    p[f"inter.{t}.same.2.g"],
                                    p[f"inter.{t}.same.2.w"],
                                    p[f"inter.{t}.same.2.b"])
            if cfg.use_inter_order:
                m21 = self.message_cross(h2, hmg.e12_pair, hmg.e12_atom,
                                         hmg.n_atoms, p[f"inter.{t}.cross.to1.w"],
                                         p[f"inter.{t}.cross.to1.b"])
                m12 = self.message_cross(h1, hmg.e12_atom, hmg.e12_pair,
                                         hmg.n_pairs, p[f"inter.{t}.cross.to2.w"],
                                         p[f"inter.{t}.cross.to2.b"])
            else:
                m21 = [[0.0] * f for _ in range(hmg.n_atoms)]
                m12 = [[0.0] * f for _ in range(hmg.n_pairs)]
            new_h1 = self.node_update(h1, [m11, m21], p[f"inter.{t}.update.1.w"],
                                      p[f"inter.{t}.update.1.b"])
            new_h2 = self.node_update(h2, [m12, m22], p[f"inter.{t}.update.2.w"],
                                      p[f"inter.{t}.update.2.b"])
        else:
            new_h1 = self.node_update(h1, [m11], p[f"inter.{t}.update.1.w"],
                                      p[f"inter.{t}.update.1.b"])
            new_h2 = h2
        for r in (0, 1):
            new_h1 = self.refine(new_h1, p[f"inter.{t}.refine.1.{r}.w"],
                                 p[f"inter.{t}.refine.1.{r}.b"])
            if cfg.use_order_2:
                new_h2 = self.refine(new_h2, p[f"inter.{t}.refine.2.{r}.w"],
                                     p[f"inter.{t}.refine.2.{r}.b"])
        return new_h1, new_h2

    def node_predictions(self, h, comp, order):
        p = self.p
        out = []
        for i in range(len(h)):
            raw = _matvec_col(h[i], p[f"out.{order}.w"]) + p[f"out.{order}.b"][0]
            s = p[f"scale.{order}.s"][int(comp[i])][0]
            r = p[f"scale.{order}.r"][int(comp[i])][0]
            out.append(s * raw + r)
        return out

    def fusion(self, hmg, h1, h2, training):
        p, cfg = self.p, self.config
        f = cfg.n_feat
        n_mol = hmg.n_mol
        vtilde = [[0.0] * (cfg.n_orders * f) for _ in range(n_mol)]
        for i in range(hmg.n_atoms):
            for k in range(f):
                vtilde[int(hmg.mol_id1[i])][k] += h1[i][k]
        if cfg.use_order_2:
            for i in range(hmg.n_pairs):
                for k in range(f):
                    vtilde[int(hmg.mol_id2[i])][f + k] += h2[i][k]
        width = cfg.n_orders * f
        if training and n_mol > 1:
            mean = [sum(row[k] for row in vtilde) / n_mol for k in range(width)]
            var = [sum((row[k] - mean[k]) ** 2 for row in vtilde) / n_mol
                   for k in range(width)]
        else:
            mean, var = self.bn.mean.tolist(), self.bn.var.tolist()
        gamma, beta = p["fusion.bn.gamma"], p["fusion.bn.beta"]
        v = [[(row[k] - mean[k]) / math.sqrt(var[k] + 1e-5) * gamma[k] + beta[k]
              for k in range(width)] for row in vtilde]
        z = [[_ssp(x) for x in _linear_row(p["fusion.hidden.w"],
                                           p["fusion.hidden.b"], row)]
             for row in v]
        orders = ("1", "2") if cfg.use_order_2 else ("1",)
        alphas = []
        for row in z:
            logits = []
            for order in orders:
                raw = _matvec_col(row, p[f"fusion.attn.{order}"])
                logits.append(raw if raw > 0 else 0.2 * raw)
            mx = max(logits)
            exps = [math.exp(l - mx) for l in logits]
            total = sum(exps)
            alphas.append([e / total for e in exps])
        return alphas

    def predict(self, hmg, feats, training=False):
        cfg = self.config
        h1, h2 = self.input_states(hmg, feats)
        for t in range(cfg.n_interactions):
            h1, h2 = self.interaction(hmg, feats, h1, h2, t)
        n_mol = hmg.n_mol
        y1_nodes = self.node_predictions(h1, hmg.comp1, "1")
        y_orders = [[0.0] * cfg.n_orders for _ in range(n_mol)]
        for i, v in enumerate(y1_nodes):
            y_orders[int(hmg.mol_id1[i])][0] += v
        if cfg.use_order_2:
            y2_nodes = self.node_predictions(h2, hmg.comp2, "2")
            for i, v in enumerate(y2_nodes):
                y_orders[int(hmg.mol_id2[i])][1] += v
        alpha = self.fusion(hmg, h1, h2, training)
        fused = [sum(a * y for a, y in zip(alpha[m], y_orders[m]))
                 for m in range(n_mol)]
        return fused, y_orders, alpha


# ---------------------------------------------------------------------------
# Brute-force heterogeneous-graph oracle


def brute_force_hmg_tables(mol: Molecule, cutoff: float):
    """Independent reconstruction of all node/edge index tables and
    attributes: double-loop thresholding, shared-atom test, membership test,
    law-of-cosines angles."""
    n = mol.n_atoms
    pos = mol.positions

    def dist(i, j):
        dx = pos[i][0] - pos[j][0]
        dy = pos[i][1] - pos[j][1]
        dz = pos[i][2] - pos[j][2]
        return math.sqrt(dx * dx + dy * dy + dz * dz)

    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            if dist(i, j) < cutoff:
                pairs.append((i, j))
    pairs.sort()
    lengths = [dist(i, j) for i, j in pairs]

    e11 = sorted([(i, j) for i, j in pairs] + [(j, i) for i, j in pairs])
    e11_dist = [dist(i, j) for i, j in e11]

    pair_index = {p: k for k, p in enumerate(pairs)}
    e12 = sorted(((a, pair_index[p]) for p in pairs for a in p),
                 key=lambda t: (t[1], t[0]))

    e22 = []
    for pa in pairs:
        for pb in pairs:
            if pa == pb:
                continue
            shared = set(pa) & set(pb)
            if len(shared) == 1:
                e22.append((pair_index[pa], pair_index[pb]))
    e22.sort()

    def angle(pa, pb):
        s = (set(pa) & set(pb)).pop()
        a = (set(pa) - {s}).pop()
        b = (set(pb) - {s}).pop()
        # Law of cosines from the three pairwise distances.
        sa, sb, ab = dist(s, a), dist(s, b), dist(a, b)
        cosang = (sa * sa + sb * sb - ab * ab) / (2.0 * sa * sb)
        return math.acos(min(1.0, max(-1.0, cosang)))

    e22_angle = [angle(pairs[i], pairs[j]) for i, j in e22]
    return {
        "pairs": pairs, "lengths": lengths,
        "e11": e11, "e11_dist": e11_dist,
        "e12": e12, "e22": e22, "e22_angle": e22_angle,
    }
