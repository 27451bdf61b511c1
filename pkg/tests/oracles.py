"""Independent reference implementations used only to check the package.

Everything here is deliberately written as straight-line scalar/numpy code
(or arbitrary-precision arithmetic) with no dependency on the code paths
it verifies.
"""

import numpy as np
from mpmath import mp, mpf
from scipy.special import erf


# ---------------------------------------------------------------- loss oracle
def focal_tversky_oracle(probs, targets, alpha, beta, gamma, eps,
                         exponent_mode="power", clamp=1e-7, dps=50):
    """Scalar-loop focal Tversky in arbitrary precision; mean over batch."""
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    assert probs.shape == targets.shape
    batch = probs.shape[0]
    with mp.workdps(dps):
        a, b, g, e = mpf(alpha), mpf(beta), mpf(gamma), mpf(eps)
        per_image = []
        for i in range(batch):
            tp = fp = fn = mpf(0)
            for p, t in zip(probs[i].ravel(), targets[i].ravel()):
                p = mpf(float(p))
                if exponent_mode == "inverse":
                    p = min(max(p, mpf(clamp)), 1 - mpf(clamp))
                t = mpf(float(t))
                tp += p * t
                fp += p * (1 - t)
                fn += (1 - p) * t
            ti = (tp + e) / (tp + a * fp + b * fn + e)
            exponent = g if exponent_mode == "power" else 1 / g
            base = max(1 - ti, mpf(0))
            per_image.append(base**exponent)
        return float(sum(per_image) / batch)


# ------------------------------------------------------------- metric oracles
def dice_iou_by_sets(pred, truth):
    """Dice/IoU via explicit coordinate-set enumeration."""
    p_set = {tuple(ix) for ix in np.argwhere(np.asarray(pred) != 0)}
    g_set = {tuple(ix) for ix in np.argwhere(np.asarray(truth) != 0)}
    inter = len(p_set & g_set)
    union = len(p_set | g_set)
    dice = 1.0 if len(p_set) + len(g_set) == 0 else 2.0 * inter / (len(p_set) + len(g_set))
    iou = 1.0 if union == 0 else inter / union
    return dice, iou


# --------------------------------------------------------------- AdamW oracle
def adamw_single_step(theta0, grad, lr, weight_decay, beta1=0.9, beta2=0.999,
                      eps=1e-8, step=1):
    """Hand-computed decoupled-weight-decay Adam update for one scalar."""
    theta = theta0 * (1.0 - lr * weight_decay)
    m = (1.0 - beta1) * grad
    v = (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return theta - lr * m_hat / (v_hat**0.5 + eps)


# ------------------------------------------------- ViT forward reference (f64)
def _layer_norm(x, weight, bias, eps=1e-6):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * weight + bias


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _attention(x, w, prefix, num_heads):
    n, c = x.shape
    head_dim = c // num_heads
    q = x @ w[f"{prefix}.query.weight"].T + w[f"{prefix}.query.bias"]
    k = x @ w[f"{prefix}.key.weight"].T + w[f"{prefix}.key.bias"]
    v = x @ w[f"{prefix}.value.weight"].T + w[f"{prefix}.value.bias"]
    out = np.zeros_like(x)
    for h in range(num_heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        scores = (q[:, sl] @ k[:, sl].T) / np.sqrt(head_dim)
        scores = scores - scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn = attn / attn.sum(axis=-1, keepdims=True)
        out[:, sl] = attn @ v[:, sl]
    return out @ w[f"{prefix}.output.weight"].T + w[f"{prefix}.output.bias"]


def reference_taps(encoder, images, taps):
    """Straight-line recomputation of the encoder's tapped feature maps.

    Returns {tap: (B, C, gh, gw) float64}. Reads the torch module's weights
    but re-does all the math in numpy.
    """
    w = {name: p.detach().cpu().numpy().astype(np.float64)
         for name, p in encoder.named_parameters()}
    images = np.asarray(images, dtype=np.float64)
    batch, _, height, width = images.shape
    ps = encoder.patch_size
    gh, gw = height // ps, width // ps
    dim = encoder.embed_dim
    num_heads = encoder.blocks[0].attn.num_heads

    kernel = w["patch_embed.weight"].reshape(dim, -1)  # (C, 3*ps*ps)
    pos = w["pos_embed"].reshape(gh * gw, dim)
    outputs = {}
    per_image = []
    for b in range(batch):
        tokens = np.zeros((gh * gw, dim))
        idx = 0
        for r in range(gh):
            for c in range(gw):
                patch = images[b, :, r * ps : (r + 1) * ps, c * ps : (c + 1) * ps]
                tokens[idx] = kernel @ patch.ravel() + w["patch_embed.bias"]
                idx += 1
        x = tokens + pos
        collected = {}
        for i in range(len(encoder.blocks)):
            p = f"blocks.{i}"
            normed = _layer_norm(x, w[f"{p}.norm1.weight"], w[f"{p}.norm1.bias"])
            x = x + _attention(normed, w, f"{p}.attn", num_heads)
            normed = _layer_norm(x, w[f"{p}.norm2.weight"], w[f"{p}.norm2.bias"])
            hidden = _gelu(normed @ w[f"{p}.mlp.fc1.weight"].T + w[f"{p}.mlp.fc1.bias"])
            x = x + hidden @ w[f"{p}.mlp.fc2.weight"].T + w[f"{p}.mlp.fc2.bias"]
            if (i + 1) in taps:
                collected[i + 1] = x.T.reshape(dim, gh, gw).copy()
        per_image.append(collected)
    for t in taps:
        outputs[t] = np.stack([per_image[b][t] for b in range(batch)])
    return outputs


# ------------------------------------------------------- finite differences
def central_difference(fn, tensor, index, h=1e-5):
    """d fn / d tensor[index] by central differences; mutates and restores."""
    original = tensor[index].item()
    tensor[index] = original + h
    up = fn()
    tensor[index] = original - h
    down = fn()
    tensor[index] = original
    return (up - down) / (2.0 * h)
