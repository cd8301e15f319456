"""Train and quantize the 64-16-10 digits classifier used by the test suite.

Writes digits_mlp.json (model), digits_queries.json (50 queries, radius 2
and 4) and digits_expected.json (integer logits for reference inputs,
computed here with exact rational arithmetic). Deterministic; rerun with
`python3 make_digits_fixture.py` from this directory.
"""

import json
from fractions import Fraction

import numpy as np
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split
from sklearn.neural_network import MLPClassifier


def quant_params(lo, hi, qmin, qmax):
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = (hi - lo) / (qmax - qmin)
    zero = int(round(qmin - lo / scale))
    return float(scale), max(qmin, min(qmax, zero))


def round_half_up(fr):
    return (fr + Fraction(1, 2)).__floor__()


def layer_forward(x, w, wz, ws, b_acc, sx, zx, sy, zy, lo, hi):
    out = []
    for j in range(len(w)):
        acc = sum((int(w[j][i]) - wz[j]) * (x[i] - zx) for i in range(len(x))) + b_acc[j]
        # Same double-precision factor as the verifier: (s_w * s_x) / s_y.
        f = Fraction((ws[j] * sx) / sy)
        y = round_half_up(zy + f * acc)
        out.append(min(max(y, lo), hi))
    return out


def main():
    digits = load_digits()
    x = digits.data / 16.0
    y = digits.target
    x_tr, x_te, y_tr, y_te = train_test_split(x, y, test_size=0.3, random_state=0)
    clf = MLPClassifier(hidden_layer_sizes=(16,), max_iter=2000, random_state=0)
    clf.fit(x_tr, y_tr)

    sx, zx = 1.0 / 255.0, 0
    w1, b1 = clf.coefs_[0].T, clf.intercepts_[0]
    w2, b2 = clf.coefs_[1].T, clf.intercepts_[1]
    h = x_tr @ w1.T + b1
    o = np.maximum(h, 0) @ w2.T + b2
    # Asymmetric hidden quantization over the pre-activation range, so the
    # fused ReLU raises the clip floor to the zero point.
    sh, zh = quant_params(float(h.min()), float(h.max()), 0, 255)
    so, zo = quant_params(float(o.min()), float(o.max()), -128, 127)

    def quant_weights(w, s_in):
        ws = [float(np.abs(row).max() / 127.0) for row in w]
        wq = [[int(np.clip(np.round(v / s), -127, 127)) for v in row] for row, s in zip(w, ws)]
        return wq, ws

    w1q, w1s = quant_weights(w1, sx)
    b1q = [int(np.round(b / (s * sx))) for b, s in zip(b1, w1s)]
    w2q, w2s = quant_weights(w2, sh)
    b2q = [int(np.round(b / (s * sh))) for b, s in zip(b2, w2s)]

    model = {
        "format_version": 1,
        "input_shape": [64],
        "input_quant": {"scale": repr(sx), "zero_point": zx, "lb": 0, "ub": 255},
        "rounding_mode": "half_up",
        "layers": [
            {
                "type": "qlinear",
                "weight": w1q,
                "weight_quant": [{"scale": repr(s), "zero_point": 0} for s in w1s],
                "bias_acc": b1q,
                "output_quant": {"scale": repr(sh), "zero_point": zh, "lb": 0, "ub": 255},
                "activation": "relu",
            },
            {
                "type": "qlinear",
                "weight": w2q,
                "weight_quant": [{"scale": repr(s), "zero_point": 0} for s in w2s],
                "bias_acc": b2q,
                "output_quant": {"scale": repr(so), "zero_point": zo, "lb": -128, "ub": 127},
                "activation": "none",
            },
        ],
    }

    def qinfer(img):
        hq = layer_forward(img, w1q, [0] * 16, w1s, b1q, sx, zx, sh, zh, max(0, zh), 255)
        return layer_forward(hq, w2q, [0] * 10, w2s, b2q, sh, zh, so, zo, -128, 127)

    to_q = lambda v: [int(min(255, max(0, round_half_up(Fraction(float(p)) * 255)))) for p in v]
    test_q = [to_q(v) for v in x_te]
    preds = [int(np.argmax(qinfer(v))) for v in test_q]
    acc = float(np.mean([p == t for p, t in zip(preds, y_te)]))

    rng = np.random.default_rng(7)
    correct = [i for i, (p, t) in enumerate(zip(preds, y_te)) if p == t]
    picks = rng.choice(correct, size=25, replace=False)
    queries = [
        {"input": test_q[i], "label": int(y_te[i]), "radius": r}
        for r in (2, 4)
        for i in picks
    ]
    expected = {
        "test_accuracy": acc,
        "cases": [{"input": test_q[i], "logits": [int(v) for v in qinfer(test_q[i])]} for i in range(20)],
    }

    with open("digits_mlp.json", "w") as f:
        json.dump(model, f, indent=1)
    with open("digits_queries.json", "w") as f:
        json.dump(queries, f)
    with open("digits_expected.json", "w") as f:
        json.dump(expected, f)
    print(f"quantized test accuracy {acc:.3f}; hidden zero point {zh}; logit zero point {zo}")


if __name__ == "__main__":
    main()
