#!/usr/bin/env python3
"""Tour of the gradient engine: graphs, backward passes, finite differences.

Builds a few small expression graphs, checks hand-derivable gradients, then
runs a single GRU step and differentiates a next-word probability through it.
"""

import numpy as np

from groundprobe import (
    ArchitectureKind,
    ExprGraph,
    backward,
    build_replay_graph,
    finite_diff,
)
from groundprobe.captioner import START_ID, END_ID, ModelParams, gru_step

print("== scalar chain rule ==")
g = ExprGraph()
x = g.input([3.0, 4.0])
w = g.input([1.0, 2.0])
dot = g.op("sum", g.op("mul", x, w))  # x . w
print("x.w =", g.value(dot)[0])
grads = backward(g, dot)
print("d(x.w)/dx =", grads[x], " (equals w)")

print("\n== softmax gradients vs finite differences ==")
rng = np.random.default_rng(0)
logits = rng.standard_normal(5)


def prob_of_token_2(v):
    g = ExprGraph()
    s = g.op("softmax", g.input(v))
    return float(g.value(g.op("pick", s, index=2))[0])


g = ExprGraph()
sm = g.op("softmax", g.input(logits))
target = g.op("pick", sm, index=2)
engine = backward(g, target)[0]
numeric = finite_diff(prob_of_token_2, logits, 1e-5)
print("engine :", np.round(engine, 6))
print("numeric:", np.round(numeric, 6))
print("max abs difference:", float(np.max(np.abs(engine - numeric))))

print("\n== one GRU step ==")
kind = ArchitectureKind.INIT_INJECT
shapes = ModelParams.tensor_shapes(kind, V=8, m=5, h=4, D=6)
params = ModelParams(kind=kind, V=8, m=5, h=4, D=6,
                     **{name: rng.uniform(-0.3, 0.3, shape)
                        for name, shape in shapes.items()})
h_next = gru_step(params, rng.standard_normal(5), np.zeros(4))
print("h' =", np.round(h_next, 4))

print("\n== gradient of p(next word) w.r.t. the image ==")
image = rng.standard_normal(6)
tokens = [START_ID, 4, 5, END_ID]
replay = build_replay_graph(kind, params, image, tokens)
for t, prob_node in enumerate(replay.probs):
    grads = backward(replay.graph, prob_node)
    p = float(replay.graph.value(prob_node)[0])
    mean_abs = float(np.mean(np.abs(grads[replay.image])))
    print(f"position {t}: p(next)={p:.4f}  mean|dp/d image|={mean_abs:.3e}")
