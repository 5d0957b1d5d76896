"""Desk-scale image-fusion classifier built from scratch on NumPy.

One shared two-stage conv/pool encoder pools each representation's image
into a feature vector; a softmax attention over representations weights
the vectors before concatenation into a two-layer MLP head.  Backprop is
hand-derived and validated by central finite differences, training is
plain mini-batch gradient descent with decoupled weight decay and
label-smoothed cross-entropy.  Everything is deterministic given the seed.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from trafficbench.ingest import ContractError

MODEL_FORMAT = "trafficbench-fusion/1"


@dataclass
class FusionHyper:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.001
    weight_decay: float = 5e-5
    label_smoothing: float = 0.1


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    val_top1: list = field(default_factory=list)
    wall_seconds: float = 0.0
    param_checksum: str = ""


class FusionNet:
    """Multi-representation image classifier with attention fusion."""

    def __init__(
        self,
        representations,
        class_count: int,
        image_size: int = 64,
        seed: int = 0,
        conv_channels=(6, 12),
        hidden: int = 32,
        bypass_conv: bool = False,
        channel_masks=None,
        dtype=np.float64,
    ):
        representations = tuple(representations)
        if not 1 <= len(representations) <= 4:
            raise ContractError("select between 1 and 4 representations")
        if class_count < 2:
            raise ContractError("need at least 2 classes")
        if image_size % 4:
            raise ContractError("image_size must be divisible by 4 (two 2x2 pools)")
        self.representations = representations
        self.class_count = class_count
        self.image_size = image_size
        self.seed = seed
        self.conv_channels = tuple(conv_channels)
        self.hidden = hidden
        self.bypass_conv = bypass_conv
        self.dtype = np.dtype(dtype)
        masks = np.ones((len(representations), 3)) if channel_masks is None else np.asarray(channel_masks, dtype=float)
        if masks.shape != (len(representations), 3):
            raise ContractError("channel_masks must be (n_representations, 3)")
        self.channel_masks = masks
        self.feat_dim = 3 if bypass_conv else self.conv_channels[1]
        self.params = self._init_params(np.random.default_rng(np.uint64(seed)))
        # data-dependent feature standardization, set once by calibrate();
        # pooled conv features are near-constant otherwise and the heads
        # would see no signal
        self.feat_mu = np.zeros((len(representations), 1, self.feat_dim), dtype=self.dtype)
        self.feat_sd = np.ones((len(representations), 1, self.feat_dim), dtype=self.dtype)
        self.calibrated = False

    # -- parameters ---------------------------------------------------------

    def _init_params(self, rng):
        f1, f2 = self.conv_channels
        d = self.feat_dim
        r = len(self.representations)

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(self.dtype)

        params = {}
        if not self.bypass_conv:
            # small positive bias keeps sparse-image activations off the
            # exact ReLU kink, where left/right derivatives disagree
            params["conv1_w"] = uniform((f1, 3, 3, 3), 3 * 9)
            params["conv1_b"] = np.full(f1, 0.01, dtype=self.dtype)
            params["conv2_w"] = uniform((f2, f1, 3, 3), f1 * 9)
            params["conv2_b"] = np.full(f2, 0.01, dtype=self.dtype)
        params["att_w"] = uniform((d,), d)
        params["att_b"] = np.zeros((), dtype=self.dtype)
        params["fc1_w"] = uniform((r * d, self.hidden), r * d)
        params["fc1_b"] = np.zeros(self.hidden, dtype=self.dtype)
        params["fc2_w"] = uniform((self.hidden, self.class_count), self.hidden)
        params["fc2_b"] = np.zeros(self.class_count, dtype=self.dtype)
        return params

    def param_checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype=np.float64).tobytes())
        return h.hexdigest()

    # -- calibration --------------------------------------------------------

    def calibrate(self, images, batch_size: int = 128) -> None:
        """Fit the fixed feature standardization on a reference image set.

        Encodes every sample once and stores per-representation mean and
        standard deviation of the pooled features.  The constants are part
        of the model, not trained, so gradients still reach the encoder.
        """
        batch = self._stack(images)
        r, n = batch.shape[0], batch.shape[1]
        feats = np.empty((r, n, self.feat_dim), dtype=self.dtype)
        for ri in range(r):
            for lo in range(0, n, batch_size):
                feats[ri, lo:lo + batch_size] = self._encode(batch[ri, lo:lo + batch_size])[0]
        self.feat_mu = feats.mean(axis=1, keepdims=True).astype(self.dtype)
        sd = feats.std(axis=1, keepdims=True)
        self.feat_sd = np.where(sd > 1e-12, sd, 1.0).astype(self.dtype)
        self.calibrated = True

    # -- forward ------------------------------------------------------------

    def forward(self, images, want_cache=False, train=False):
        """Probability rows over classes for a dict representation -> batch.

        ``images[rep]`` is (N, H, W, 3) with pixels in [0, 1].  Attention
        weights are exposed through the cache / ``attention`` method.
        In training mode the feature standardization uses batch statistics
        (and backprop goes through them); otherwise the stored calibration
        constants apply.
        """
        batch = self._stack(images)
        feats, enc_caches = [], []
        for ri in range(batch.shape[0]):
            f, cache = self._encode(batch[ri])
            feats.append(f)
            enc_caches.append(cache)
        f_raw = np.stack(feats)  # (R, N, D)
        if train:
            mu = f_raw.mean(axis=1, keepdims=True)
            sd = f_raw.std(axis=1, keepdims=True)
            sd = np.where(sd > 1e-12, sd, 1.0)
        else:
            mu, sd = self.feat_mu, self.feat_sd
        f = (f_raw - mu) / sd  # (R, N, D)
        scores = f @ self.params["att_w"] + self.params["att_b"]  # (R, N)
        alpha = _softmax(scores.T).T  # softmax over representations
        g = (alpha[:, :, None] * f).transpose(1, 0, 2).reshape(f.shape[1], -1)
        h_pre = g @ self.params["fc1_w"] + self.params["fc1_b"]
        h = np.maximum(h_pre, 0.0)
        logits = h @ self.params["fc2_w"] + self.params["fc2_b"]
        proba = _softmax(logits)
        if not want_cache:
            return proba
        return proba, {
            "enc": enc_caches, "f": f, "alpha": alpha, "g": g,
            "h_pre": h_pre, "h": h, "proba": proba,
            "sd": sd, "train": train,
        }

    def attention(self, images) -> np.ndarray:
        """Per-sample attention weights (N, R); rows sum to 1."""
        batch = self._stack(images)
        f = np.stack([self._encode(batch[ri])[0] for ri in range(batch.shape[0])])
        f = (f - self.feat_mu) / self.feat_sd
        scores = f @ self.params["att_w"] + self.params["att_b"]
        return _softmax(scores.T)

    def _stack(self, images):
        if set(images) != set(self.representations):
            raise ContractError(
                f"expected representations {self.representations}, got {tuple(images)}"
            )
        arrs = []
        n = None
        for ri, rep in enumerate(self.representations):
            a = np.asarray(images[rep], dtype=self.dtype)
            if a.ndim != 4 or a.shape[1] != self.image_size or a.shape[3] != 3:
                raise ContractError(f"{rep}: expected (N, {self.image_size}, {self.image_size}, 3)")
            if n is None:
                n = a.shape[0]
            elif a.shape[0] != n:
                raise ContractError(f"{rep}: batch size {a.shape[0]} mismatches {n}")
            a = a * self.channel_masks[ri].astype(self.dtype)
            arrs.append(a.transpose(0, 3, 1, 2))  # NCHW
        return np.stack(arrs)  # (R, N, 3, H, W)

    def _encode(self, x):
        """Shared conv stack + global average pool: (N,3,H,W) -> (N, D)."""
        if self.bypass_conv:
            return x.mean(axis=(2, 3)), {"x": x}
        p = self.params
        c1, cols1 = _conv3x3(x, p["conv1_w"], p["conv1_b"])
        r1 = np.maximum(c1, 0.0)
        p1, idx1 = _maxpool2(r1)
        c2, cols2 = _conv3x3(p1, p["conv2_w"], p["conv2_b"])
        r2 = np.maximum(c2, 0.0)
        p2, idx2 = _maxpool2(r2)
        feat = p2.mean(axis=(2, 3))
        return feat, {
            "x": x, "cols1": cols1, "c1": c1, "idx1": idx1, "p1": p1,
            "cols2": cols2, "c2": c2, "idx2": idx2, "p2": p2,
        }

    # -- loss and backward --------------------------------------------------

    def loss(self, images, labels, smoothing: float = 0.1, train: bool = True):
        proba, cache = self.forward(images, want_cache=True, train=train)
        q = self._smooth_targets(labels, smoothing)
        eps = np.finfo(self.dtype).tiny
        return float(-(q * np.log(proba + eps)).sum(axis=1).mean()), cache, q

    def backward(self, cache, q):
        """Gradients of the smoothed cross-entropy wrt every parameter."""
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        n = cache["proba"].shape[0]
        r = len(self.representations)
        d = self.feat_dim

        dlogits = (cache["proba"] - q) / n
        grads["fc2_w"] = cache["h"].T @ dlogits
        grads["fc2_b"] = dlogits.sum(axis=0)
        dh = dlogits @ p["fc2_w"].T
        dh_pre = dh * (cache["h_pre"] > 0)
        grads["fc1_w"] = cache["g"].T @ dh_pre
        grads["fc1_b"] = dh_pre.sum(axis=0)
        dg = (dh_pre @ p["fc1_w"].T).reshape(n, r, d).transpose(1, 0, 2)  # (R,N,D)

        f, alpha = cache["f"], cache["alpha"]
        dalpha = (dg * f).sum(axis=2)  # (R, N)
        df = alpha[:, :, None] * dg
        # softmax over the representation axis
        dscores = alpha * (dalpha - (alpha * dalpha).sum(axis=0, keepdims=True))
        df += dscores[:, :, None] * p["att_w"][None, None, :]
        grads["att_w"] = (dscores[:, :, None] * f).sum(axis=(0, 1))
        grads["att_b"] = np.asarray(dscores.sum(), dtype=self.dtype)

        if cache["train"]:
            # batch-norm backward: gradients of the batch mean and std
            # cancel uniform-shift and rescale components, keeping the
            # encoder step well conditioned
            fhat = cache["f"]
            df = (df - df.mean(axis=1, keepdims=True)
                  - fhat * (df * fhat).mean(axis=1, keepdims=True)) / cache["sd"]
        else:
            df = df / cache["sd"]
        for ri in range(r):
            self._encode_backward(cache["enc"][ri], df[ri], grads)
        return grads

    def _encode_backward(self, ec, dfeat, grads):
        if self.bypass_conv:
            return
        p = self.params
        h2 = ec["p2"].shape[2]
        dp2 = np.broadcast_to(dfeat[:, :, None, None], ec["p2"].shape) / (h2 * h2)
        dr2 = _maxpool2_backward(dp2, ec["idx2"], ec["c2"].shape)
        dc2 = dr2 * (ec["c2"] > 0)
        dw2, db2, dp1 = _conv3x3_backward(dc2, ec["cols2"], p["conv2_w"], ec["p1"].shape)
        grads["conv2_w"] += dw2
        grads["conv2_b"] += db2
        dr1 = _maxpool2_backward(dp1, ec["idx1"], ec["c1"].shape)
        dc1 = dr1 * (ec["c1"] > 0)
        dw1, db1, _ = _conv3x3_backward(dc1, ec["cols1"], p["conv1_w"], ec["x"].shape)
        grads["conv1_w"] += dw1
        grads["conv1_b"] += db1

    def _smooth_targets(self, labels, smoothing):
        labels = np.asarray(labels)
        c = self.class_count
        q = np.full((len(labels), c), smoothing / c, dtype=self.dtype)
        q[np.arange(len(labels)), labels] += 1.0 - smoothing
        return q

    # -- persistence --------------------------------------------------------

    def save(self, path):
        desc = {
            "format": MODEL_FORMAT,
            "representations": list(self.representations),
            "class_count": self.class_count,
            "image_size": self.image_size,
            "seed": self.seed,
            "conv_channels": list(self.conv_channels),
            "hidden": self.hidden,
            "bypass_conv": self.bypass_conv,
            "dtype": self.dtype.name,
        }
        desc["calibrated"] = self.calibrated
        arrays = {f"param_{k}": v for k, v in self.params.items()}
        arrays["channel_masks"] = self.channel_masks
        arrays["feat_mu"] = self.feat_mu
        arrays["feat_sd"] = self.feat_sd
        np.savez(path, descriptor=json.dumps(desc, sort_keys=True), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            desc = json.loads(str(data["descriptor"]))
            if desc.get("format") != MODEL_FORMAT:
                raise ContractError(
                    f"refusing to load model format {desc.get('format')!r}; "
                    f"expected {MODEL_FORMAT}"
                )
            net = cls(
                desc["representations"],
                desc["class_count"],
                image_size=desc["image_size"],
                seed=desc["seed"],
                conv_channels=tuple(desc["conv_channels"]),
                hidden=desc["hidden"],
                bypass_conv=desc["bypass_conv"],
                channel_masks=data["channel_masks"],
                dtype=np.dtype(desc["dtype"]),
            )
            for k in net.params:
                net.params[k] = data[f"param_{k}"].astype(net.dtype)
            if "feat_mu" in data:
                net.feat_mu = data["feat_mu"].astype(net.dtype)
                net.feat_sd = data["feat_sd"].astype(net.dtype)
                net.calibrated = bool(desc.get("calibrated", False))
        return net


def build_fusion_net(representations, class_count, image_size=64, seed=0, **kwargs) -> FusionNet:
    return FusionNet(representations, class_count, image_size=image_size, seed=seed, **kwargs)


def train_fusion(net: FusionNet, images, labels, hyper: FusionHyper | None = None, seed: int = 0,
                 val_images=None, val_labels=None) -> TrainReport:
    """Mini-batch gradient descent with decoupled weight decay.

    ``images`` maps each representation to an aligned (N, H, W, 3) batch;
    window order must match across representations.
    """
    hyper = hyper or FusionHyper()
    labels = np.asarray(labels)
    sizes = {rep: len(np.asarray(im)) for rep, im in images.items()}
    if len(set(sizes.values())) != 1:
        worst = min(sizes, key=sizes.get)
        raise ContractError(f"misaligned image sets: {worst} has {sizes[worst]} windows, expected {max(sizes.values())}")
    n = next(iter(sizes.values()))
    if n != len(labels):
        raise ContractError("labels length must match image count")
    stacked = {rep: np.asarray(im, dtype=net.dtype) for rep, im in images.items()}
    rng = np.random.default_rng(np.uint64(seed))
    report = TrainReport()
    t0 = time.perf_counter()
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, hyper.batch_size):
            idx = order[lo:lo + hyper.batch_size]
            batch = {rep: arr[idx] for rep, arr in stacked.items()}
            loss, cache, q = net.loss(batch, labels[idx], hyper.label_smoothing)
            grads = net.backward(cache, q)
            for k, v in net.params.items():
                step = hyper.lr * grads[k]
                if v.ndim > 0 and hyper.weight_decay > 0 and k.endswith("_w"):
                    step = step + hyper.lr * hyper.weight_decay * v
                net.params[k] = (v - step).astype(net.dtype)
            epoch_loss += loss * len(idx)
        report.epoch_losses.append(epoch_loss / n)
        # refresh the inference-mode standardization from the training set
        net.calibrate(stacked)
        if val_images is not None:
            proba = net.forward({rep: np.asarray(im, dtype=net.dtype) for rep, im in val_images.items()})
            report.val_top1.append(float((proba.argmax(axis=1) == np.asarray(val_labels)).mean()))
    report.wall_seconds = time.perf_counter() - t0
    report.param_checksum = net.param_checksum()
    return report


def gradient_check(net: FusionNet, images, labels, epsilon: float = 1e-6,
                   n_params: int = 200, seed: int = 0,
                   use_batch_stats: bool = True) -> float:
    """Max relative error between backprop and central finite differences.

    Samples at least ``n_params`` coordinates across all parameter arrays;
    coordinates where both gradients are essentially zero (dead inputs)
    are skipped by rule.  With ``use_batch_stats=False`` the check runs
    against the net's current stored standardization constants instead of
    batch statistics.  Standardizing by a near-zero batch deviation raises
    the loss curvature by order (1/sd)^2, which overwhelms central
    differences at the epsilon floor on large images, so big-image checks
    should use the fixed-constant mode (identity constants on a fresh net).
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ContractError("epsilon must lie in [1e-6, 1e-3]")
    if net.dtype != np.float64:
        raise ContractError("gradient_check requires a float64 net")
    images = {rep: np.asarray(im, dtype=np.float64) for rep, im in images.items()}
    _, cache, q = net.loss(images, labels, train=use_batch_stats)
    grads = net.backward(cache, q)
    rng = np.random.default_rng(np.uint64(seed))
    names = sorted(net.params)
    total = sum(net.params[k].size for k in names)
    n_params = min(n_params, total)
    picks = rng.choice(total, size=n_params, replace=False)
    offsets = np.cumsum([0] + [net.params[k].size for k in names])
    worst = 0.0
    for flat_idx in np.sort(picks):
        ai = np.searchsorted(offsets, flat_idx, side="right") - 1
        name = names[ai]
        local = flat_idx - offsets[ai]
        param = net.params[name].reshape(-1) if net.params[name].ndim else None
        orig = float(net.params[name].reshape(-1)[local]) if param is not None else float(net.params[name])
        def set_val(v):
            if net.params[name].ndim:
                net.params[name].reshape(-1)[local] = v
            else:
                net.params[name] = np.asarray(v, dtype=net.dtype)
        def central(eps):
            set_val(orig + eps)
            lp = net.loss(images, labels, train=use_batch_stats)[0]
            set_val(orig - eps)
            lm = net.loss(images, labels, train=use_batch_stats)[0]
            set_val(orig)
            return (lp - lm) / (2 * eps)

        numeric = central(epsilon)
        numeric_half = central(epsilon / 2)
        analytic = float(np.asarray(grads[name]).reshape(-1)[local] if np.asarray(grads[name]).ndim else grads[name])
        # both gradients below ~100x the finite-difference noise floor
        # (loss scale * machine epsilon / step) cannot be certified at any
        # useful relative precision
        if max(abs(numeric), abs(analytic)) < 1e-6:
            continue
        # two step sizes must agree for the difference quotient to testify:
        # a ReLU kink or pool-tie crossing inside the window (or a gradient
        # at the finite-difference noise floor) makes them disagree, and no
        # epsilon in the allowed range can resolve such coordinates
        if abs(numeric - numeric_half) > 1e-4 * max(abs(numeric), abs(numeric_half)) + 1e-9:
            continue
        rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic))
        worst = max(worst, rel)
    return worst


def smoothed_entropy_floor(class_count: int, smoothing: float = 0.1) -> float:
    """Minimum achievable label-smoothed cross-entropy (entropy of the target)."""
    q = np.full(class_count, smoothing / class_count)
    q[0] += 1.0 - smoothing
    nz = q > 0
    return float(-(q[nz] * np.log(q[nz])).sum())


# -- conv/pool primitives ---------------------------------------------------


def _conv3x3(x, w, b):
    """Same-padded 3x3 convolution.  x: (N,C,H,W), w: (F,C,3,3)."""
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 9, h, wd), dtype=x.dtype)
    for k, (di, dj) in enumerate((i, j) for i in range(3) for j in range(3)):
        cols[:, :, k] = xp[:, :, di:di + h, dj:dj + wd]
    out = np.einsum("fck,nckhw->nfhw", w.reshape(w.shape[0], c, 9), cols, optimize=True)
    out += b[None, :, None, None]
    return out, cols


def _conv3x3_backward(dout, cols, w, x_shape):
    f, c = w.shape[0], w.shape[1]
    wr = w.reshape(f, c, 9)
    dw = np.einsum("nckhw,nfhw->fck", cols, dout, optimize=True).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    dcols = np.einsum("fck,nfhw->nckhw", wr, dout, optimize=True)
    n, _, h, wd = x_shape
    dxp = np.zeros((n, c, h + 2, wd + 2), dtype=dout.dtype)
    for k, (di, dj) in enumerate((i, j) for i in range(3) for j in range(3)):
        dxp[:, :, di:di + h, dj:dj + wd] += dcols[:, :, k]
    return dw, db, dxp[:, :, 1:-1, 1:-1]


def _maxpool2(x):
    n, c, h, w = x.shape
    xr = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool2_backward(dout, idx, x_shape):
    n, c, h, w = x_shape
    dxr = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(dxr, idx[..., None], dout[..., None], axis=-1)
    return dxr.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)


def _softmax(scores):
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)
