"""Asking a model to list anomalies, with a scripted stand-in for the model.

Each window is sent with an instruction to return the anomalous values. The
stand-in below answers the way chat models tend to: usually the right values,
sometimes a stray number, now and then prose. Votes are then merged across
samples (alpha) and across overlapping windows (beta).

Run: python3 demos/02_prompter_with_stub.py
"""

import numpy as np

from sigllm import codec
from sigllm.backend import CompletionResponse
from sigllm.prompter import PrompterConfig, run_prompter


class ScriptedModel:
    parallelism = 4

    def __init__(self, seed=0):
        self.seed = seed

    def complete(self, request):
        window = codec.last_numeric_run(request.context)
        rng = np.random.default_rng([self.seed, sum(window)])
        median = np.median(window)
        outliers = [str(v) for v in window if v > median + 40]
        samples = []
        for _ in range(request.n_samples):
            roll = rng.random()
            if roll < 0.1:
                samples.append("Here are the anomalies you asked for.")
            elif roll < 0.7 and outliers:
                samples.append(",".join(outliers))
            else:
                samples.append(str(int(rng.choice(window))))
        return CompletionResponse(samples, {}, 0.0)


values = 50 + 10 * np.sin(np.arange(300) / 6)
values[[90, 91, 220]] += 60
config = PrompterConfig(window_size=50, step_size=10, decimals=0)
print("prompt for the first window ends with:",
      "..." + codec.serialize_window(codec.encode(values, 0).values[:50])[-40:])

detections = run_prompter(values, config, ScriptedModel())
for interval in detections:
    print(f"anomaly at {interval.start}-{interval.end}, window agreement {interval.severity:.2f}")
print("values the model named that were not in the window:",
      detections.metadata["ignored_values"])

# Stricter voting trades recall for precision.
strict = run_prompter(values, PrompterConfig(window_size=50, step_size=10, decimals=0,
                                             alpha=0.9, beta=1.0), ScriptedModel())
print("with alpha=0.9, beta=1.0:", [(i.start, i.end) for i in strict])
