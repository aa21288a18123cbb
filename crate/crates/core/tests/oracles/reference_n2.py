"""Step-by-step reference for the collaborative attention and the critic on
two nodes. Prints the values frozen into tests/model_contract.rs."""
import numpy as np

np.set_printoptions(precision=17)

H = np.array([[0.5, -1.0], [1.5, 0.25]])
G = np.array([[0.0, 1.0], [0.8, -0.6]])

W = {
    "hq": [[1, 0.5], [-0.5, 1]], "hk": [[0.3, -0.2], [0.7, 0.4]],
    "hv": [[1, 2], [0, -1]], "hvref": [[0.5, 0], [0.25, 1]],
    "ho": [[1, 0], [0, 1], [0.5, -0.5], [0.2, 0.3]],
    "gq": [[0.2, 1], [1, -0.3]], "gk": [[-1, 0.4], [0.6, 0.9]],
    "gv": [[0.1, 0.2], [0.3, 0.4]], "gvref": [[-0.7, 0.5], [0.2, 0.8]],
    "go": [[0.3, -0.1], [0.9, 0.2], [-0.4, 0.6], [0.5, 0.5]],
}
W = {k: np.array(v, dtype=float) for k, v in W.items()}


def softmax_rows(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


dk = 2
alpha_h = softmax_rows((H @ W["hq"]) @ (H @ W["hk"]).T / np.sqrt(dk))
alpha_g = softmax_rows((G @ W["gq"]) @ (G @ W["gk"]).T / np.sqrt(dk))
out_h = np.hstack([alpha_h @ (H @ W["hv"]), alpha_g @ (H @ W["hvref"])]) @ W["ho"]
out_g = np.hstack([alpha_g @ (G @ W["gv"]), alpha_h @ (G @ W["gvref"])]) @ W["go"]
print("attention h", out_h.flatten().tolist())
print("attention g", out_g.flatten().tolist())

# critic weights follow a fixed generator, one parameter after another
names = [("critic.q.w", (4, 2)), ("critic.k.w", (4, 2)), ("critic.v.w", (4, 2)), ("critic.o.w", (2, 4)),
         ("critic.local.w", (4, 4)), ("critic.local.b", (4,)), ("critic.global.w", (4, 4)),
         ("critic.ffn.0.w", (4, 3)), ("critic.ffn.0.b", (3,)), ("critic.ffn.1.w", (3, 2)),
         ("critic.ffn.1.b", (2,)), ("critic.ffn.2.w", (2, 1)), ("critic.ffn.2.b", (1,))]
P = {}
for k, (name, shape) in enumerate(names):
    n = int(np.prod(shape))
    P[name] = np.array([0.5 * np.sin(1.3 * (i + 1) + 0.7 * k) for i in range(n)]).reshape(shape)

E = np.hstack([H, G])
q, kk, v = E @ P["critic.q.w"], E @ P["critic.k.w"], E @ P["critic.v.w"]
a = softmax_rows(q @ kk.T / np.sqrt(2))
E2 = E + (a @ v) @ P["critic.o.w"]
fused = E2 @ P["critic.local.w"] + P["critic.local.b"] + E2.mean(axis=0) @ P["critic.global.w"]
pooled = fused.mean(axis=0)
x = np.maximum(pooled @ P["critic.ffn.0.w"] + P["critic.ffn.0.b"], 0)
x = np.maximum(x @ P["critic.ffn.1.w"] + P["critic.ffn.1.b"], 0)
value = x @ P["critic.ffn.2.w"] + P["critic.ffn.2.b"]
print("critic", value.tolist())
