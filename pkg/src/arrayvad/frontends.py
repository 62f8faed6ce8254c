"""Trainable feature frontends: signal in, (T, F) feature graph out.

Each frontend owns its learnable tensors and knows how to build the
differentiable path from a multichannel signal to the per-frame feature
matrix the sequence model consumes. The heavy fixed preprocessing (STFT,
normalization of attention inputs, mel matrix) enters the graph as
constants; only the combination weights (and, for the analytic bank, the
filter impulse responses) carry gradients.

Every frontend also has a plain-numpy ``combined`` path reusing the
evaluation ops in ``combinator``; the tests hold the two paths together,
which is what makes the graph trustworthy.

``make_frontend`` builds any variant from a JSON-able config dict; the
same dict comes back from ``config()`` so checkpoints can rebuild the
exact frontend before loading weights.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .beamform import ArrayGeometry, cdr_mask, mvdr
from .combinator import (
    AttentionParams,
    CombinedSpectrogram,
    attention_init,
    attention_weights,
    combine_mag_phase_graph,
    combine_real_graph,
    ecsacc_combine,
    icsacc_combine,
    mvn_graph,
    sacc_combine,
    weights_graph,
)
from .errors import ArgumentError
from .signal_io import MultichannelSignal
from .spectral import (
    LOG_EPS,
    StftConfig,
    frame_signal,
    hilbert_basis,
    log_compress,
    mel_filterbank,
    mel_project,
    mvn,
    stft,
)

FRONTEND_KINDS = ("sacc", "analytic", "ecsacc", "icsacc", "mvdr")

_ATTN_NAMES = ("wq", "wk", "wv", "bq", "bk", "bv")


def _attn_tensors(feat_dim, attn_dim, seed, prefix=""):
    init = attention_init(feat_dim, attn_dim, seed)
    return {prefix + name: ad.parameter(arr)
            for name, arr in init.as_arrays().items()}


def _attn_view(params, prefix=""):
    """Numpy AttentionParams over the live tensor data (no copy)."""
    return AttentionParams(**{name: params[prefix + name].data
                              for name in _ATTN_NAMES})


def _subparams(params, prefix):
    return {name: params[prefix + name] for name in _ATTN_NAMES}


class Frontend:
    """Base: config plumbing shared by every variant."""

    kind = None

    def __init__(self, sample_rate, n_mels, attn_dim, seed):
        self.sample_rate = int(sample_rate)
        self.n_mels = int(n_mels)
        self.attn_dim = int(attn_dim)
        self.seed = int(seed)
        self.stft_cfg = StftConfig()
        self.params = {}

    # -- weights in/out -------------------------------------------------------

    def state_arrays(self):
        return {name: np.array(t.data) for name, t in self.params.items()}

    def load_state(self, arrays):
        missing = set(self.params) - set(arrays)
        if missing:
            raise ArgumentError(f"missing frontend tensors: {sorted(missing)}")
        for name, tensor in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ArgumentError(
                    f"shape mismatch for {name}: {arr.shape} vs "
                    f"{tensor.data.shape}")
            tensor.data[...] = arr

    def n_parameters(self):
        return sum(t.data.size for t in self.params.values())

    # -- shared helpers -------------------------------------------------------

    def _check_signal(self, signal: MultichannelSignal):
        if signal.sample_rate != self.sample_rate:
            raise ArgumentError(
                f"frontend built for {self.sample_rate} Hz, signal is "
                f"{signal.sample_rate} Hz")

    def _stft(self, signal):
        self._check_signal(signal)
        return stft(signal, self.stft_cfg)

    def _mel_tensor(self):
        return ad.Tensor(mel_filterbank(self.n_mels, self.stft_cfg.n_bins,
                                        self.sample_rate))

    def _logmel(self, combined_mag):
        return ad.tlog(combined_mag @ self._mel_tensor() + LOG_EPS)

    def config(self):
        return {
            "kind": self.kind,
            "sample_rate": self.sample_rate,
            "n_mels": self.n_mels,
            "attn_dim": self.attn_dim,
        }

    # subclasses: features(), combined(), feature_dim


class SaccStftFrontend(Frontend):
    """Real simplex weights over per-channel STFT magnitudes, then log-mel."""

    kind = "sacc"

    def __init__(self, sample_rate=16000, n_mels=64, attn_dim=256, seed=0):
        super().__init__(sample_rate, n_mels, attn_dim, seed)
        self.params = _attn_tensors(self.stft_cfg.n_bins, self.attn_dim, seed)

    @property
    def feature_dim(self):
        return self.n_mels

    def features(self, signal) -> ad.Tensor:
        spec = self._stft(signal)
        mag = np.abs(spec.values)
        att_in = np.transpose(mvn(log_compress(mag)), (1, 0, 2))
        w = weights_graph(ad.Tensor(att_in), self.params)
        combined = combine_real_graph(w, ad.Tensor(np.transpose(mag, (1, 0, 2))))
        return self._logmel(combined)

    def combined(self, signal) -> CombinedSpectrogram:
        return sacc_combine(self._stft(signal), _attn_view(self.params))


class AnalyticSaccFrontend(Frontend):
    """Learned analytic FIR bank replacing the STFT; features are the
    real/imag parts of the weighted channel combination."""

    kind = "analytic"

    def __init__(self, sample_rate=16000, n_filters=32, kernel_len=400,
                 stride=160, attn_dim=256, seed=0):
        super().__init__(sample_rate, n_mels=1, attn_dim=attn_dim, seed=seed)
        if kernel_len % 2 != 0:
            raise ArgumentError("kernel_len must be even")
        if kernel_len < 2 or stride < 1 or n_filters < 1:
            raise ArgumentError("bad analytic bank geometry")
        self.n_filters = int(n_filters)
        self.kernel_len = int(kernel_len)
        self.stride = int(stride)
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(kernel_len)
        self.params = _attn_tensors(self.n_filters, self.attn_dim, seed)
        self.params["real_ir"] = ad.parameter(
            rng.uniform(-bound, bound, size=(self.n_filters, self.kernel_len)))
        self._basis_t = hilbert_basis(self.kernel_len).T

    @property
    def feature_dim(self):
        return 2 * self.n_filters

    def _bank_outputs(self, signal):
        """(T, C, n_filters) real and imaginary graph nodes."""
        self._check_signal(signal)
        frames = frame_signal(signal.samples, self.kernel_len, self.stride)
        ft = ad.Tensor(np.transpose(frames, (1, 0, 2)))
        real_ir = self.params["real_ir"]
        imag_ir = real_ir @ ad.Tensor(self._basis_t)
        re = ft @ ad.transpose(real_ir, (1, 0))
        im = ft @ ad.transpose(imag_ir, (1, 0))
        return re, im

    def features(self, signal) -> ad.Tensor:
        re, im = self._bank_outputs(signal)
        mag = ad.complex_abs(re, im)
        att_in = mvn_graph(ad.tlog(mag + LOG_EPS), time_axis=0)
        w = weights_graph(att_in, _subparams(self.params, ""))
        re_c = (w * re).sum(axis=1)
        im_c = (w * im).sum(axis=1)
        return ad.concat([re_c, im_c], axis=-1)

    def combined(self, signal) -> CombinedSpectrogram:
        re, im = self._bank_outputs(signal)
        values = np.transpose(re.data + 1j * im.data, (1, 0, 2))
        w = attention_weights(mvn(log_compress(np.abs(values))),
                              _attn_view(self.params))
        out = np.einsum("ct,ctk->tk", w.values, values)
        return CombinedSpectrogram(out, "analytic", self.sample_rate,
                                   self.stft_cfg.hop_s, weights=w)

    def config(self):
        return {
            "kind": self.kind,
            "sample_rate": self.sample_rate,
            "n_filters": self.n_filters,
            "kernel_len": self.kernel_len,
            "stride": self.stride,
            "attn_dim": self.attn_dim,
        }


def _split_mag_phase(spec_values, parts):
    """Numpy attention inputs for the two representation parts."""
    if parts == "mag_phase":
        first = mvn(log_compress(np.abs(spec_values)))
        second = mvn(np.angle(spec_values))
    else:
        first = mvn(spec_values.real)
        second = mvn(spec_values.imag)
    return first, second


def _complex_combo_graph(w1, w2, spec_values, parts):
    """(T,K) re/im of the weighted channel sum for either representation."""
    if parts == "mag_phase":
        mag = ad.Tensor(np.transpose(np.abs(spec_values), (1, 0, 2)))
        ang = ad.Tensor(np.transpose(np.angle(spec_values), (1, 0, 2)))
        return combine_mag_phase_graph(w1, w2, mag, ang)
    yre = ad.Tensor(np.transpose(spec_values.real, (1, 0, 2)))
    yim = ad.Tensor(np.transpose(spec_values.imag, (1, 0, 2)))
    re = (w1 * yre - w2 * yim).sum(axis=1)
    im = (w1 * yim + w2 * yre).sum(axis=1)
    return re, im


class EcSaccFrontend(Frontend):
    """Two attention banks (magnitude and phase parts), complex combination,
    then log-mel of the combined magnitude."""

    kind = "ecsacc"

    def __init__(self, sample_rate=16000, n_mels=64, attn_dim=256, seed=0,
                 parts="mag_phase"):
        super().__init__(sample_rate, n_mels, attn_dim, seed)
        if parts not in ("mag_phase", "real_imag"):
            raise ArgumentError(f"unknown parts layout {parts!r}")
        self.parts = parts
        k = self.stft_cfg.n_bins
        self.params = {}
        self.params.update(_attn_tensors(k, self.attn_dim, seed, "mag/"))
        self.params.update(_attn_tensors(k, self.attn_dim, seed + 1, "phase/"))

    @property
    def feature_dim(self):
        return self.n_mels

    def features(self, signal) -> ad.Tensor:
        spec = self._stft(signal)
        first, second = _split_mag_phase(spec.values, self.parts)
        w1 = weights_graph(ad.Tensor(np.transpose(first, (1, 0, 2))),
                           _subparams(self.params, "mag/"))
        w2 = weights_graph(ad.Tensor(np.transpose(second, (1, 0, 2))),
                           _subparams(self.params, "phase/"))
        re, im = _complex_combo_graph(w1, w2, spec.values, self.parts)
        return self._logmel(ad.complex_abs(re, im))

    def combined(self, signal) -> CombinedSpectrogram:
        return ecsacc_combine(self._stft(signal),
                              _attn_view(self.params, "mag/"),
                              _attn_view(self.params, "phase/"),
                              parts=self.parts)

    def config(self):
        out = super().config()
        out["parts"] = self.parts
        return out


class IcSaccFrontend(Frontend):
    """One attention bank over the feature-axis concatenation of both parts;
    a split value head emits the magnitude and phase weight columns."""

    kind = "icsacc"

    def __init__(self, sample_rate=16000, n_mels=64, attn_dim=256, seed=0,
                 parts="mag_phase"):
        super().__init__(sample_rate, n_mels, attn_dim, seed)
        if parts not in ("mag_phase", "real_imag"):
            raise ArgumentError(f"unknown parts layout {parts!r}")
        self.parts = parts
        self.params = _attn_tensors(2 * self.stft_cfg.n_bins, self.attn_dim,
                                    seed)

    @property
    def feature_dim(self):
        return self.n_mels

    def features(self, signal) -> ad.Tensor:
        spec = self._stft(signal)
        k = spec.n_bins
        first, second = _split_mag_phase(spec.values, self.parts)
        feats = np.concatenate([first, second], axis=-1)
        w = weights_graph(ad.Tensor(np.transpose(feats, (1, 0, 2))),
                          self.params, value_split=k)
        re, im = _complex_combo_graph(w[:, :, :1], w[:, :, 1:],
                                      spec.values, self.parts)
        return self._logmel(ad.complex_abs(re, im))

    def combined(self, signal) -> CombinedSpectrogram:
        return icsacc_combine(self._stft(signal), _attn_view(self.params),
                              parts=self.parts)

    def config(self):
        out = super().config()
        out["parts"] = self.parts
        return out


class MvdrFrontend(Frontend):
    """Fixed (non-trainable) beamforming front end: CDR speech mask, MVDR
    filter from the masked covariances, log-mel of the beamformed magnitude."""

    kind = "mvdr"

    def __init__(self, geometry: ArrayGeometry, sample_rate=16000, n_mels=64):
        super().__init__(sample_rate, n_mels, attn_dim=1, seed=0)
        if not isinstance(geometry, ArrayGeometry):
            raise ArgumentError("mvdr frontend needs an ArrayGeometry")
        self.geometry = geometry
        self.params = {}

    @property
    def feature_dim(self):
        return self.n_mels

    def combined(self, signal) -> CombinedSpectrogram:
        spec = self._stft(signal)
        mask = cdr_mask(spec, self.geometry)
        result = mvdr(spec, mask)
        return CombinedSpectrogram(np.abs(result.values), "mvdr",
                                   self.sample_rate, self.stft_cfg.hop_s)

    def features(self, signal) -> ad.Tensor:
        mag = self.combined(signal).values
        return ad.Tensor(log_compress(mel_project(mag, self.n_mels,
                                                  self.sample_rate)))

    def config(self):
        return {
            "kind": self.kind,
            "sample_rate": self.sample_rate,
            "n_mels": self.n_mels,
            "geometry": self.geometry.to_dict(),
        }


def make_frontend(config: dict, seed=None) -> Frontend:
    """Build a frontend from its config dict.

    ``seed`` overrides the config's seed when given; cfgs saved by
    ``config()`` omit the seed, so pass one for fresh inits and rely on
    ``load_state`` when restoring trained weights.
    """
    if not isinstance(config, dict):
        raise ArgumentError("frontend config must be a dict")
    cfg = dict(config)
    kind = cfg.pop("kind", None)
    if kind not in FRONTEND_KINDS:
        raise ArgumentError(
            f"unknown frontend kind {kind!r}; expected one of {FRONTEND_KINDS}")
    if seed is not None:
        cfg["seed"] = int(seed)
    try:
        if kind == "sacc":
            return SaccStftFrontend(**cfg)
        if kind == "analytic":
            return AnalyticSaccFrontend(**cfg)
        if kind == "ecsacc":
            return EcSaccFrontend(**cfg)
        if kind == "icsacc":
            return IcSaccFrontend(**cfg)
        geom = cfg.pop("geometry", None)
        if isinstance(geom, dict):
            geom = ArrayGeometry.from_dict(geom)
        if geom is None:
            raise ArgumentError("mvdr frontend config needs a geometry")
        cfg.pop("seed", None)
        return MvdrFrontend(geom, **cfg)
    except TypeError as exc:
        raise ArgumentError(f"bad frontend config: {exc}") from exc
