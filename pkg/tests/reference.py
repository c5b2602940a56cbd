"""Independent reference implementations used only as test oracles."""

import math

import numpy as np

from finemoe import tensor as tn
from finemoe.model import MoETransformer
from finemoe.moe import RoutingDecision


def silu_np(x):
    return x / (1.0 + np.exp(-x))


def ffn_np(x, w_in, w_gate, w_out):
    return (silu_np(x @ w_gate) * (x @ w_in)) @ w_out


def generic_moe(u, centroids, experts, k, shared=()):
    """Token-by-token top-k MoE with raw softmax gates, plus always-on experts and a residual.

    ``experts``/``shared`` are lists of (w_in, w_gate, w_out) numpy triples.
    """
    out = np.array(u, dtype=float)
    for t in range(u.shape[0]):
        x = u[t]
        logits = [float(np.dot(x, e)) for e in centroids]
        top = max(logits)
        weights = [math.exp(z - top) for z in logits]
        total = sum(weights)
        s = [w / total for w in weights]
        chosen = sorted(range(len(s)), key=lambda i: (-s[i], i))[:k]
        for p in shared:
            out[t] += ffn_np(x[None, :], *p)[0]
        for i in chosen:
            out[t] += s[i] * ffn_np(x[None, :], *experts[i])[0]
    return out


def triples(ffns):
    return [(p.w_in.data, p.w_gate.data, p.w_out.data) for p in ffns]


class DenseReferenceModel(MoETransformer):
    """Evaluates every routed expert on every token and weights it by a masked gate column."""

    def moe(self, a, residual, lp, options):
        cfg = self.cfg.moe
        h = residual
        for p in lp.experts.shared:
            h = tn.add(h, _ffn_tensor(a, p))
        if cfg.n_routed == 0:
            return h, None
        logits = tn.matmul(a, tn.transpose(lp.router.centroids))
        s = tn.softmax(logits, axis=1)
        order = np.lexsort((np.broadcast_to(np.arange(cfg.n_routed), s.shape), -s.data), axis=1)
        keep = np.zeros(s.shape)
        np.put_along_axis(keep, order[:, :cfg.k_routed], 1.0, axis=1)
        g = tn.mul(s, keep)
        for i, p in enumerate(lp.experts.routed):
            col = tn.reshape(tn.take(g, (slice(None), i)), (a.shape[0], 1))
            h = tn.add(h, tn.mul(_ffn_tensor(a, p), col))
        return h, RoutingDecision(s=s, selected=order[:, :cfg.k_routed], g=g, k_routed=cfg.k_routed)


def _ffn_tensor(x, p):
    return tn.matmul(tn.mul(tn.silu(tn.matmul(x, p.w_gate)), tn.matmul(x, p.w_in)), p.w_out)
