"""Microphone-array channel combination front ends with a TCN sequence model
for voice activity and overlapped speech detection, plus the surrounding
toolkit: STFT and learnable analytic filterbank features, attention-based
channel combinators, beampattern and localization analysis, scene simulation,
training with a channel-masking invariance objective, and RTTM scoring."""

__version__ = "0.1.0"
