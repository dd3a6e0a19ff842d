"""Learnable fields: modulated 3D feature network, radiance decoders,
sky head, positional encoding and per-frame appearance embeddings.

The 3D network starts from the input volume downsampled 8x and runs three
{modulated residual block -> 2x trilinear upsample} stages, so its output
matches the input resolution.  Each block re-injects the raw input volume
at its own scale through learned scale/bias modulation on top of a
parameter-free instance normalization.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .fusion import ForegroundAABB, InputVolume

LN2 = float(np.log(2.0))


def smooth_act(x):
    """Shifted softplus: smooth like softplus, but zero stays neutral
    (act(0) = 0), so an all-zero volume degenerates to an exactly
    constant field instead of leaking padding artifacts."""
    return ad.softplus(x) - LN2


def positional_encoding(x: np.ndarray, levels: int,
                        include_input: bool = True) -> np.ndarray:
    """[N, 3] -> [N, 3 + 6*levels]: sin/cos at octave frequencies.

    Inputs are expected in [-1, 1]; with levels = 0 only the passthrough
    remains.
    """
    x = np.atleast_2d(x)
    parts = [x] if include_input else []
    for l in range(levels):
        arg = (2.0 ** l) * np.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    if not parts:
        return np.zeros((x.shape[0], 0), dtype=x.dtype)
    return np.concatenate(parts, axis=1)


def normalize_to_aabb(x: np.ndarray, aabb: ForegroundAABB) -> np.ndarray:
    """World point -> [-1, 1]^3 coordinates of the foreground box."""
    return 2.0 * (x - aabb.min) / aabb.span() - 1.0


def contract_unbounded(xn: np.ndarray) -> np.ndarray:
    """Map box-normalized coords of any magnitude into [-1, 1]^3.

    Identity inside the box; outside, the L-inf radius r maps to 2 - 1/r,
    so the whole unbounded space lands in the [-2, 2] shell which is then
    halved.  Used for background samples only.
    """
    r = np.maximum(np.abs(xn).max(axis=1, keepdims=True), 1.0)
    scaled = xn * ((2.0 - 1.0 / r) / r)
    return scaled * 0.5


class Linear:
    def __init__(self, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator, zero: bool = False,
                 bias_init: float = 0.0):
        bound = 0.0 if zero else 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.full(n_out, bias_init), requires_grad=True)
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    def params(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}


class MLP:
    """MLP with smooth activations; the caller applies the output
    nonlinearity.  Smoothness keeps the whole field C-infinity, which the
    finite-difference gradient audits depend on.
    """

    def __init__(self, name: str, dims: list[int], rng, out_bias: float = 0.0):
        self.layers = []
        for i in range(len(dims) - 1):
            bias_init = out_bias if i == len(dims) - 2 else 0.0
            self.layers.append(Linear(f"{name}.l{i}", dims[i], dims[i + 1],
                                      rng, bias_init=bias_init))

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = smooth_act(x)
        return x

    def params(self):
        out = {}
        for l in self.layers:
            out.update(l.params())
        return out


class Conv3:
    def __init__(self, name: str, c_in: int, c_out: int, k: int,
                 rng, zero: bool = False):
        fan_in = c_in * k ** 3
        bound = 0.0 if zero else 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k, k))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.pad = (k - 1) // 2
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv3d(x, self.weight, self.bias, stride=1, padding=self.pad)

    def params(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}


class Modulation:
    """Scale/bias prediction from the downsampled input volume.

    The scale and bias convolutions start at exactly zero so the block
    begins as a plain (unmodulated) residual block.
    """

    def __init__(self, name: str, c_cond: int, hidden: int, c_out: int, rng):
        self.shared = Conv3(f"{name}.shared", c_cond, hidden, 3, rng)
        self.scale = Conv3(f"{name}.scale", hidden, c_out, 3, rng, zero=True)
        self.bias = Conv3(f"{name}.bias", hidden, c_out, 3, rng, zero=True)

    def __call__(self, cond: Tensor):
        h = smooth_act(self.shared(cond))
        return self.scale(h), self.bias(h)

    def params(self):
        out = {}
        for m in (self.shared, self.scale, self.bias):
            out.update(m.params())
        return out


class SpadeBlock:
    def __init__(self, name: str, c_in: int, c_out: int, c_cond: int,
                 hidden: int, rng):
        self.mod1 = Modulation(f"{name}.mod1", c_cond, hidden, c_in, rng)
        self.conv1 = Conv3(f"{name}.conv1", c_in, c_out, 3, rng)
        self.mod2 = Modulation(f"{name}.mod2", c_cond, hidden, c_out, rng)
        self.conv2 = Conv3(f"{name}.conv2", c_out, c_out, 3, rng)
        self.skip = Conv3(f"{name}.skip", c_in, c_out, 1, rng)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        s1, b1 = self.mod1(cond)
        h = ad.instance_norm3d(x) * (s1 + 1.0) + b1
        h = self.conv1(smooth_act(h))
        s2, b2 = self.mod2(cond)
        h = ad.instance_norm3d(h) * (s2 + 1.0) + b2
        h = self.conv2(smooth_act(h))
        return h + self.skip(x)

    def params(self):
        out = {}
        for m in (self.mod1, self.conv1, self.mod2, self.conv2, self.skip):
            out.update(m.params())
        return out


class SpadeNetwork:
    N_STAGES = 3

    def __init__(self, cfg: ModelConfig, rng, c_in: int = 4):
        chs = list(cfg.spade_channels)
        if len(chs) != self.N_STAGES:
            raise ValueError("expected one channel width per stage")
        self.proj = Conv3("spade.proj", c_in, chs[0], 3, rng)
        outs = chs[1:] + [chs[-1]]
        self.blocks = [
            SpadeBlock(f"spade.block{i}", chs[i], outs[i], c_in,
                       cfg.spade_hidden, rng)
            for i in range(self.N_STAGES)
        ]
        self.out = Conv3("spade.out", outs[-1], cfg.feature_dim, 3, rng)

    def __call__(self, vol: Tensor) -> Tensor:
        dims = vol.data.shape[1:]
        if any(d % 8 for d in dims):
            raise ValueError(f"volume dims {dims} must be divisible by 8")
        conds = {f: ad.avgpool3d(vol, f) for f in (8, 4, 2)}
        h = self.proj(conds[8])
        factor = 8
        for block in self.blocks:
            h = block(h, conds[factor])
            h = ad.upsample3d(h, 2)
            factor //= 2
        return self.out(h)

    def params(self):
        out = self.proj.params()
        for b in self.blocks:
            out.update(b.params())
        out.update(self.out.params())
        return out


class FieldModel:
    """All learnable components plus the query-side plumbing."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        k3 = 3 * cfg.n_ref_views
        pe_dim = 3 + 6 * cfg.pe_levels
        self.spade = SpadeNetwork(cfg, rng) if cfg.use_3d_features else None
        if cfg.use_3d_features:
            self.density = MLP("density", [cfg.feature_dim, cfg.density_width, 1],
                               rng, out_bias=-1.5)
            color_in = cfg.feature_dim + k3 + pe_dim + 3 + cfg.app_dim
            dims = [color_in] + [cfg.color_width] * (cfg.color_layers - 1) + [3]
            self.color = MLP("color", dims, rng)
            self.fg2d = None
        else:
            self.density = None
            self.color = None
            self.fg2d = _JointHead("fg2d", k3, pe_dim, cfg, rng)
        self.bg = _JointHead("bg", k3, pe_dim, cfg, rng)
        self.sky0 = Linear("sky.l0", k3 + 3, cfg.sky_hidden, rng)
        self.sky1 = Linear("sky.l1", cfg.sky_hidden, 3, rng)
        self.app_tables: dict[str, Tensor] = {}

    # -- parameters -----------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.spade is not None:
            out.update(self.spade.params())
            out.update(self.density.params())
            out.update(self.color.params())
        else:
            out.update(self.fg2d.params())
        out.update(self.bg.params())
        out.update(self.sky0.params())
        out.update(self.sky1.params())
        for scene, table in sorted(self.app_tables.items()):
            out[f"app.{scene}"] = table
        return out

    def head_parameters(self) -> dict[str, Tensor]:
        """Decoder heads only (everything learnable except the 3D CNN)."""
        out = {}
        for name, p in self.named_parameters().items():
            if not name.startswith("spade.") and not name.startswith("app."):
                out[name] = p
        return out

    def add_appearance_table(self, scene: str, n_frames: int) -> Tensor:
        table = Tensor(np.zeros((n_frames, self.cfg.app_dim)),
                       requires_grad=True)
        self.app_tables[scene] = table
        return table

    def mean_appearance(self) -> np.ndarray:
        if not self.app_tables:
            return np.zeros(self.cfg.app_dim, dtype=ad.default_dtype())
        rows = np.concatenate([t.data for t in self.app_tables.values()])
        return rows.mean(axis=0)

    # -- field queries ----------------------------------------------------
    def spade_forward(self, vol: InputVolume) -> Tensor:
        if self.spade is None:
            raise RuntimeError("model was built without 3D features")
        return self.spade(ad.astensor(vol.channels()))

    def density_foreground(self, f3d: Tensor) -> Tensor:
        """softplus of the tiny density MLP; depends on the 3D feature only."""
        return ad.softplus(self.density(f3d).reshape(-1))

    def query_foreground(self, x: np.ndarray, d: np.ndarray,
                         feature_volume: Tensor, aabb: ForegroundAABB,
                         f2d: np.ndarray, app: Tensor):
        """(sigma, rgb) for points inside the foreground box."""
        if not aabb.contains(x).all():
            raise ValueError("foreground query outside the AABB")
        xn = normalize_to_aabb(x, aabb)
        f3d, _ = ad.grid_sample_trilinear(
            feature_volume, (xn + 1.0) * 0.5)
        sigma = self.density_foreground(f3d)
        pe = positional_encoding(xn, self.cfg.pe_levels)
        app_rows = self._app_rows(app, len(x))
        feats = ad.concat([f3d, ad.astensor(f2d), ad.astensor(pe),
                           ad.astensor(d), app_rows], axis=1)
        rgb = ad.sigmoid(self.color(feats))
        return sigma, rgb

    def query_foreground_2d(self, xn: np.ndarray, d: np.ndarray,
                            f2d: np.ndarray, app: Tensor,
                            density_only: bool = False):
        """Ablation path: density and color from retrieved colors alone."""
        app_rows = None if density_only else self._app_rows(app, len(xn))
        return self.fg2d(xn, d, f2d, app_rows, density_only=density_only)

    def query_background(self, x: np.ndarray, d: np.ndarray,
                         aabb: ForegroundAABB, f2d: np.ndarray, app: Tensor):
        xn = contract_unbounded(normalize_to_aabb(x, aabb))
        return self.bg(xn, d, f2d, self._app_rows(app, len(x)))

    def query_sky(self, d: np.ndarray, f2d_sky: np.ndarray) -> Tensor:
        feats = ad.concat([ad.astensor(f2d_sky), ad.astensor(d)], axis=1)
        return ad.sigmoid(self.sky1(smooth_act(self.sky0(feats))))

    def _app_rows(self, app: Tensor, n: int) -> Tensor:
        if app.data.ndim == 2 and app.data.shape[0] == n:
            return app
        return ad.broadcast_rows(app, n)


class _JointHead:
    """Joint density+color MLP on (retrieved colors, encoded position, d).

    Density taps the trunk before the appearance embedding enters, so
    opacity stays exposure-independent while color can adapt per frame.
    """

    def __init__(self, name: str, k3: int, pe_dim: int, cfg: ModelConfig, rng):
        w = cfg.bg_width
        self.pe_levels = cfg.pe_levels
        self.trunk0 = Linear(f"{name}.trunk0", k3 + pe_dim + 3, w, rng)
        self.trunk1 = Linear(f"{name}.trunk1", w, w, rng)
        self.sigma = Linear(f"{name}.sigma", w, 1, rng, bias_init=-1.5)
        self.color0 = Linear(f"{name}.color0", w + cfg.app_dim, w, rng)
        self.color1 = Linear(f"{name}.color1", w, 3, rng)

    def __call__(self, xn: np.ndarray, d: np.ndarray, f2d: np.ndarray,
                 app_rows: Tensor | None, density_only: bool = False):
        pe = positional_encoding(xn, self.pe_levels)
        feats = ad.concat([ad.astensor(f2d), ad.astensor(pe),
                           ad.astensor(d)], axis=1)
        h = smooth_act(self.trunk1(smooth_act(self.trunk0(feats))))
        sigma = ad.softplus(self.sigma(h).reshape(-1))
        if density_only:
            return sigma, None
        hc = ad.concat([h, app_rows], axis=1)
        rgb = ad.sigmoid(self.color1(smooth_act(self.color0(hc))))
        return sigma, rgb

    def params(self):
        out = {}
        for l in (self.trunk0, self.trunk1, self.sigma, self.color0, self.color1):
            out.update(l.params())
        return out


# -- checkpoints ---------------------------------------------------------

_META_FIELDS = ("feature_dim", "spade_hidden", "density_width", "color_width",
                "color_layers", "bg_width", "sky_hidden", "pe_levels",
                "app_dim", "n_ref_views")


def model_state(model: FieldModel) -> dict[str, np.ndarray]:
    state = {name: p.data for name, p in model.named_parameters().items()}
    for f in _META_FIELDS:
        state[f"meta.{f}"] = np.array(float(getattr(model.cfg, f)), dtype=np.float32)
    state["meta.use_3d_features"] = np.array(
        1.0 if model.cfg.use_3d_features else 0.0, dtype=np.float32)
    state["meta.spade_channels"] = np.array(model.cfg.spade_channels,
                                            dtype=np.float32)
    state["app._mean"] = model.mean_appearance().astype(np.float32)
    return state


def save_model(path, model: FieldModel):
    ad.save_checkpoint(path, model_state(model))


def config_from_state(state: dict[str, np.ndarray]) -> ModelConfig:
    cfg = ModelConfig()
    for f in _META_FIELDS:
        setattr(cfg, f, int(np.ravel(state[f"meta.{f}"])[0]))
    cfg.use_3d_features = bool(np.ravel(state["meta.use_3d_features"])[0] > 0.5)
    cfg.spade_channels = tuple(int(v) for v in state["meta.spade_channels"])
    return cfg


def load_model(path) -> tuple[FieldModel, np.ndarray]:
    """Rebuild a model from a checkpoint; returns (model, mean appearance)."""
    state = ad.load_checkpoint(path)
    cfg = config_from_state(state)
    model = FieldModel(cfg, seed=0)
    for scene in sorted({k.split(".", 1)[1] for k in state
                         if k.startswith("app.") and not k.startswith("app._")}):
        model.add_appearance_table(scene, state[f"app.{scene}"].shape[0])
    params = model.named_parameters()
    for name, p in params.items():
        if name not in state:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        if tuple(state[name].shape) != tuple(p.data.shape):
            raise ValueError(f"checkpoint shape mismatch for {name!r}")
        p.data = state[name].astype(ad.default_dtype())
    mean_app = state.get("app._mean",
                         np.zeros(cfg.app_dim, np.float32)).astype(ad.default_dtype())
    return model, mean_app
