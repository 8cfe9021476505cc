"""Multi-channel keyword-spotting model: shared convolutional encoder,
stacked three-way mixer blocks (time / frequency / microphone channel),
convolutional aggregation to a latent vector, and a softmax head that can
take centroid-distance features alongside the latent.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numeric as nm
from .numeric import ContractError, Tensor


def conv_out(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


@dataclass
class ModelConfig:
    n_channels: int = 6
    n_blocks: int = 4
    n_frames: int = 197
    n_mels: int = 40
    enc_width: int = 16
    enc_kernel: tuple = (5, 5)
    enc_stride1: tuple = (2, 2)
    enc_stride2: tuple = (2, 2)
    block_kernel_freq: int = 3
    block_kernel_time: int = 3
    hidden_time: int = 128
    hidden_freq: int = 64
    hidden_chan: int = 16
    latent_dim: int = 64
    agg_kernel: tuple = (3, 3)
    centroid_aware: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_blocks < 1 or self.n_channels < 1 or self.latent_dim < 2:
            raise ContractError("need n_blocks >= 1, n_channels >= 1, latent_dim >= 2")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def grid_frames(self) -> int:
        kt, _ = self.enc_kernel
        t1 = conv_out(self.n_frames, kt, self.enc_stride1[0], kt // 2)
        return conv_out(t1, 3, self.enc_stride2[0], 1)

    @property
    def grid_mels(self) -> int:
        _, kf = self.enc_kernel
        f1 = conv_out(self.n_mels, kf, self.enc_stride1[1], kf // 2)
        return conv_out(f1, 3, self.enc_stride2[1], 1)


# widths below are tuned so the totals line up with the published model
# family's footprints (see README, "Reference configurations")
_REFERENCE = {
    "ref-1ch": dict(n_channels=1, enc_width=16, hidden_time=260, hidden_freq=128,
                    hidden_chan=8, latent_dim=64),
    "ref-6ch": dict(n_channels=6, enc_width=16, hidden_time=900, hidden_freq=256,
                    hidden_chan=64, latent_dim=64),
    "ref-6ch-centroid": dict(n_channels=6, enc_width=16, hidden_time=1400,
                             hidden_freq=320, hidden_chan=64, latent_dim=64,
                             centroid_aware=True),
    "ref-multilook": dict(n_channels=4, enc_width=16, hidden_time=1050,
                          hidden_freq=256, hidden_chan=48, latent_dim=64,
                          centroid_aware=True),
    "mini": dict(n_channels=6, enc_width=8, enc_stride1=(4, 2), hidden_time=48,
                 hidden_freq=32, hidden_chan=16, latent_dim=16),
    "mini-1ch": dict(n_channels=1, enc_width=8, enc_stride1=(4, 2), hidden_time=48,
                     hidden_freq=32, hidden_chan=16, latent_dim=16),
    "mini-centroid": dict(n_channels=6, enc_width=8, enc_stride1=(4, 2), hidden_time=48,
                          hidden_freq=32, hidden_chan=16, latent_dim=16,
                          centroid_aware=True),
}


def reference_config(name: str, **overrides) -> ModelConfig:
    if name not in _REFERENCE:
        raise KeyError(f"unknown reference config {name!r}; have {sorted(_REFERENCE)}")
    kw = dict(_REFERENCE[name])
    kw.update(overrides)
    return ModelConfig(**kw)


def reference_config_names() -> list:
    return sorted(_REFERENCE)


def config_to_dict(cfg: ModelConfig) -> dict:
    d = dict(cfg.__dict__)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    kw = dict(d)
    for k in ("enc_kernel", "enc_stride1", "enc_stride2", "agg_kernel"):
        if k in kw:
            kw[k] = tuple(kw[k])
    return ModelConfig(**kw)


class MixerModel:
    """Parameter container plus forward pass."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None,
                 identity_init: bool = False):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = rng or np.random.default_rng(0)
        self._build(rng, identity_init)

    # -- parameters ---------------------------------------------------------

    def _p(self, name: str, arr: np.ndarray) -> Tensor:
        t = Tensor(arr.astype(self.config.np_dtype), requires_grad=True)
        self.params[name] = t
        return t

    def _trunc_normal(self, rng, shape, std=0.02):
        # truncated at 2 std, the usual transformer-style init
        a = rng.normal(0.0, std, size=shape)
        bad = np.abs(a) > 2 * std
        while bad.any():
            a[bad] = rng.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(a) > 2 * std
        return a

    def _fan_in(self, rng, shape, fan_in):
        # He-style scaling keeps activation magnitude roughly constant
        return self._trunc_normal(rng, shape, std=np.sqrt(2.0 / fan_in))

    def _build(self, rng, identity_init):
        cfg = self.config
        e = cfg.enc_width
        kt, kf = cfg.enc_kernel
        tn = self._trunc_normal
        fi = self._fan_in
        self._p("enc1_w", fi(rng, (e, 1, kt, kf), kt * kf))
        self._p("enc1_b", np.zeros(e))
        if identity_init:
            dw = np.zeros((e, 3, 3)); dw[:, 1, 1] = 1.0
            pw = np.eye(e).reshape(e, e, 1, 1).astype(float)
        else:
            dw = fi(rng, (e, 3, 3), 9)
            pw = fi(rng, (e, e, 1, 1), e)
        self._p("enc2_dw", dw)
        self._p("enc2_dwb", np.zeros(e))
        self._p("enc2_pw", pw)
        self._p("enc2_pwb", np.zeros(e))
        self._p("enc3_pw", fi(rng, (1, e, 1, 1), e))
        self._p("enc3_pwb", np.zeros(1))

        tg, fg, c = cfg.grid_frames, cfg.grid_mels, cfg.n_channels
        for i in range(cfg.n_blocks):
            p = f"blk{i}_"
            if identity_init:
                cf = np.zeros((1, 1, cfg.block_kernel_freq)); cf[0, 0, cfg.block_kernel_freq // 2] = 1.0
                ct = np.zeros((1, cfg.block_kernel_time, 1)); ct[0, cfg.block_kernel_time // 2, 0] = 1.0
                pwf = np.ones((1, 1, 1, 1)); pwt = np.ones((1, 1, 1, 1))
            else:
                cf = fi(rng, (1, 1, cfg.block_kernel_freq), cfg.block_kernel_freq)
                ct = fi(rng, (1, cfg.block_kernel_time, 1), cfg.block_kernel_time)
                pwf = tn(rng, (1, 1, 1, 1), std=0.5)
                pwt = tn(rng, (1, 1, 1, 1), std=0.5)
            self._p(p + "convf_dw", cf)
            self._p(p + "convf_pw", pwf)
            self._p(p + "convf_pwb", np.zeros(1))
            self._p(p + "convt_dw", ct)
            self._p(p + "convt_pw", pwt)
            self._p(p + "convt_pwb", np.zeros(1))
            for tag, n_in, hidden in (("t", tg, cfg.hidden_time),
                                      ("f", fg, cfg.hidden_freq),
                                      ("c", c, cfg.hidden_chan)):
                self._p(p + f"ln{tag}_g", np.ones(n_in))
                self._p(p + f"ln{tag}_b", np.zeros(n_in))
                self._p(p + f"mix{tag}_w1", fi(rng, (n_in, hidden), n_in))
                self._p(p + f"mix{tag}_b1", np.zeros(hidden))
                w2 = (np.zeros((hidden, n_in)) if identity_init
                      else fi(rng, (hidden, n_in), hidden))
                self._p(p + f"mix{tag}_w2", w2)
                self._p(p + f"mix{tag}_b2", np.zeros(n_in))

        d = cfg.latent_dim
        ka, kb = cfg.agg_kernel
        self._p("agg_w", fi(rng, (d, c, ka, kb), c * ka * kb))
        self._p("agg_b", np.zeros(d))
        self._p("head_w", fi(rng, (d, 2), d))
        self._p("head_b", np.zeros(2))
        if cfg.centroid_aware:
            self._p("l2_w", tn(rng, (2, 2), std=0.5))

    def parameter_count(self) -> int:
        return sum(int(t.data.size) for t in self.params.values())

    def zero_mixer_outputs(self):
        """Test hook: zero every mixing stage's output projection."""
        for name, t in self.params.items():
            if "mix" in name and (name.endswith("_w2") or name.endswith("_b2")):
                t.data = np.zeros_like(t.data)

    # -- forward pieces -----------------------------------------------------

    def conv_encode(self, x: Tensor) -> Tensor:
        """(B, C, T, F) feature cube -> (B, C, T', F') token grid, the same
        encoder weights applied to every audio channel."""
        cfg = self.config
        b, c, t, f = x.shape
        if c != cfg.n_channels:
            raise ContractError(f"expected {cfg.n_channels} channels, got {c}")
        if (t, f) != (cfg.n_frames, cfg.n_mels):
            raise ContractError(
                f"expected {cfg.n_frames}x{cfg.n_mels} features, got {t}x{f}"
            )
        p = self.params
        kt, kf = cfg.enc_kernel
        h = nm.reshape(x, (b * c, 1, t, f))
        h = nm.conv2d(h, p["enc1_w"], p["enc1_b"], stride=cfg.enc_stride1,
                      padding=(kt // 2, kf // 2))
        h = nm.gelu(h)
        h = nm.depthwise_separable_conv(h, p["enc2_dw"], p["enc2_pw"],
                                        depth_bias=p["enc2_dwb"],
                                        point_bias=p["enc2_pwb"],
                                        stride=cfg.enc_stride2, padding=(1, 1))
        h = nm.gelu(h)
        h = nm.conv2d(h, p["enc3_pw"], p["enc3_pwb"])
        return nm.reshape(h, (b, c, cfg.grid_frames, cfg.grid_mels))

    def block_convs(self, x: Tensor, i: int) -> Tensor:
        """Frequency-axis then time-axis depthwise-separable convolution."""
        cfg = self.config
        p = self.params
        b, c, t, f = x.shape
        h = nm.reshape(x, (b * c, 1, t, f))
        h = nm.depthwise_separable_conv(
            h, p[f"blk{i}_convf_dw"], p[f"blk{i}_convf_pw"],
            point_bias=p[f"blk{i}_convf_pwb"],
            padding=(0, cfg.block_kernel_freq // 2))
        h = nm.depthwise_separable_conv(
            h, p[f"blk{i}_convt_dw"], p[f"blk{i}_convt_pw"],
            point_bias=p[f"blk{i}_convt_pwb"],
            padding=(cfg.block_kernel_time // 2, 0))
        return nm.reshape(h, (b, c, t, f))

    def _mix_stage(self, x: Tensor, i: int, tag: str, axis: int) -> Tensor:
        p = self.params
        pre = f"blk{i}_"
        h = nm.layer_norm(x, p[pre + f"ln{tag}_g"], p[pre + f"ln{tag}_b"], axis=axis)
        last = x.ndim - 1
        if axis != last:
            h = nm.moveaxis(h, axis, last)
        h = nm.affine(h, p[pre + f"mix{tag}_w1"], p[pre + f"mix{tag}_b1"])
        h = nm.gelu(h)
        h = nm.affine(h, p[pre + f"mix{tag}_w2"], p[pre + f"mix{tag}_b2"])
        if axis != last:
            h = nm.moveaxis(h, last, axis)
        return nm.add(x, h)

    def mixing_stack(self, x: Tensor, i: int) -> Tensor:
        """The three residual mixes: over time, over frequency, over audio
        channel, in that order."""
        u = self._mix_stage(x, i, "t", axis=2)
        y = self._mix_stage(u, i, "f", axis=3)
        z = self._mix_stage(y, i, "c", axis=1)
        return z

    def mixer_block(self, x: Tensor, i: int) -> Tensor:
        return self.mixing_stack(self.block_convs(x, i), i)

    def post_conv_aggregate(self, x: Tensor) -> Tensor:
        """(B, C, T', F') grid -> (B, D) latent via a channel-coupling
        convolution and global average pooling."""
        cfg = self.config
        ka, kb = cfg.agg_kernel
        h = nm.conv2d(x, self.params["agg_w"], self.params["agg_b"],
                      padding=(ka // 2, kb // 2))
        h = nm.gelu(h)
        return nm.reduce_mean(h, axis=(2, 3))

    def l2_features(self, latent: Tensor, centroids) -> Tensor:
        """Distances from each latent to the two keyword centroids, (B, 2).

        Gradients flow into the model through the latent; the centroids are
        constants here (they have their own optimizer)."""
        b = latent.shape[0]
        feats = []
        for v in (centroids.v0, centroids.v1):
            vb = Tensor(np.tile(np.asarray(v, dtype=latent.dtype), (b, 1)))
            diff = nm.sub(latent, vb)
            sq = nm.reduce_sum(nm.mul(diff, diff), axis=-1, keepdims=True)
            feats.append(nm.sqrt(sq))
        return nm.concat(feats, axis=-1)

    def predict(self, latent: Tensor, l2: Tensor | None = None) -> Tensor:
        cfg = self.config
        if cfg.centroid_aware and l2 is None:
            raise ContractError("centroid-aware head needs L2 distance features")
        if not cfg.centroid_aware and l2 is not None:
            raise ContractError("head is not configured for L2 distance features")
        logits = nm.affine(latent, self.params["head_w"], self.params["head_b"])
        if l2 is not None:
            logits = nm.add(logits, nm.affine(l2, self.params["l2_w"]))
        return nm.softmax(logits, axis=-1)

    def forward(self, cube, centroids=None):
        """Feature cube (B, C, T, F) -> (class probabilities (B, 2), latent (B, D))."""
        x = cube if isinstance(cube, Tensor) else Tensor(
            np.asarray(cube, dtype=self.config.np_dtype))
        h = self.conv_encode(x)
        for i in range(self.config.n_blocks):
            h = self.mixer_block(h, i)
        latent = self.post_conv_aggregate(h)
        l2 = None
        if self.config.centroid_aware:
            if centroids is None:
                raise ContractError("centroid-aware model needs centroids at forward")
            l2 = self.l2_features(latent, centroids)
        probs = self.predict(latent, l2)
        return probs, latent
