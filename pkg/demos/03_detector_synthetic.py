"""Forecast based detection on a synthetic signal without any network access.

The oracle stub plays a model that has learned the clean signal: it forecasts
the reference sine plus a little noise, so the injected spikes show up as
large residuals. Swap in ``HTTPBackend`` to use a real endpoint.

Run: python3 demos/03_detector_synthetic.py
"""

import time

import numpy as np

from sigllm import codec
from sigllm.backend import OracleStub
from sigllm.detector import DetectorConfig, run_detector

length = 2000
reference = np.sin(2 * np.pi * np.arange(length) / 100)
observed = reference.copy()
spikes = [300, 700, 1100, 1500, 1900]
observed[spikes] += 10

config = DetectorConfig()
backend = OracleStub.from_signals(observed, reference,
                                  decimals=codec.encode(observed).decimals, sigma=0.01)

began = time.perf_counter()
debug = {}
detections = run_detector(observed, config, backend, debug=debug)
print(f"{detections.metadata['windows']} windows forecast in "
      f"{time.perf_counter() - began:.1f}s")
print("injected:", spikes)
for interval in detections:
    print(f"found {interval.start}-{interval.end}, peak smoothed error {interval.severity:.2f}")

# The smoothed error and threshold mask are available for plotting.
errors = debug["errors"]
print(f"error signal covers {len(errors)} points (the first {config.window_size} have no "
      f"forecast), median {np.median(errors):.2e}, max {errors.max():.2f}")
