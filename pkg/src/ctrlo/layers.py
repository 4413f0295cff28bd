"""Parameter containers and the small layers built on diffcore.

Parameters live in nested dicts of leaf Tensors so they can be flattened to
``"a.b.c"`` names for the optimizer and the checkpoint writer.
"""
import numpy as np

from . import diffcore as dc


def init_linear(rng, d_in, d_out, bias=True, scale=1.0):
    bound = scale / np.sqrt(d_in)
    p = {"w": dc.param(rng.uniform(-bound, bound, size=(d_in, d_out)))}
    if bias:
        p["b"] = dc.param(np.zeros(d_out))
    return p


def apply_linear(x, p):
    return dc.linear(x, p["w"], p.get("b"))


def init_mlp(rng, sizes, bias=True):
    # He-uniform before each activation, the plain bound on the output layer;
    # the plain 1/sqrt(d_in) bound shrinks activations ~3x per layer and a
    # deep decoder then starts out emitting a near constant
    n = len(sizes) - 1
    return {str(i): init_linear(rng, a, b, bias, scale=np.sqrt(6.0) if i < n - 1 else 1.0)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))}


def apply_mlp(x, p, act=dc.silu):
    n = len(p)
    for i in range(n):
        x = apply_linear(x, p[str(i)])
        if i < n - 1:
            x = act(x)
    return x


def init_layer_norm(d):
    return {"gamma": dc.param(np.ones(d)), "beta": dc.param(np.zeros(d))}


def apply_layer_norm(x, p):
    return dc.layer_norm(x, p["gamma"], p["beta"])


def init_gru(rng, d_in, d):
    bound = 1.0 / np.sqrt(d)
    return {
        "w_x": dc.param(rng.uniform(-bound, bound, size=(d_in, 3 * d))),
        "w_h": dc.param(rng.uniform(-bound, bound, size=(d, 3 * d))),
        "b_x": dc.param(np.zeros(3 * d)),
        "b_h": dc.param(np.zeros(3 * d)),
    }


def flatten(tree, prefix=""):
    out = {}
    for k in sorted(tree):
        v = tree[k]
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, name + "."))
        else:
            out[name] = v
    return out


def unflatten(flat):
    tree = {}
    for name, v in flat.items():
        node = tree
        *head, last = name.split(".")
        for h in head:
            node = node.setdefault(h, {})
        node[last] = v
    return tree


def count_params(tree):
    return sum(p.data.size for p in flatten(tree).values())
