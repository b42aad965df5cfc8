"""Physical interaction prediction with span selection: Python bindings."""

from ._core import (
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_USAGE,
    generate_episode,
    psnr,
    run_cli,
    salient_frames,
    span_weights,
    threshold_profile,
)

__all__ = [
    "EXIT_OK",
    "EXIT_RUNTIME",
    "EXIT_USAGE",
    "generate_episode",
    "psnr",
    "run_cli",
    "salient_frames",
    "span_weights",
    "threshold_profile",
]
