"""From a real valued series to the text a language model reads, and back.

Run: python3 demos/01_signal_to_text.py
"""

import numpy as np

from sigllm import codec

# Four readings of a sensor.
values = np.array([0.2437, 0.3087, 0.002, 0.462])

# Already non-negative, so keep them as they are and fix three decimals.
quantized = codec.quantize(values, 3)
print("integers:       ", quantized.values.tolist())
print("plain text:     ", codec.serialize_window(quantized.values))
print("spaced digits:  ", codec.serialize_window(quantized.values, space_digits=True))

# The usual route shifts by the minimum first and picks the precision itself.
encoded = codec.encode(values)
print(f"shifted by {encoded.scale.min_offset}, {encoded.decimals} decimals:",
      codec.serialize_window(encoded.values))

# Model output is read back leniently: spacing is fine, junk ends the sequence.
parsed, discarded = codec.parse_numeric_sequence("2 4 4 , 3 0 9 , 2 , oops , 7")
print("parsed:", parsed, "discarded tokens:", discarded)
print("decoded:", codec.decode(parsed, quantized))

# Long series go to the model in overlapping windows.
series = codec.encode(np.sin(np.arange(12) / 2), decimals=1)
windows = codec.make_windows(series.values, window_size=6, step_size=3)
for start, window in zip(windows.starts, windows.windows):
    print(f"window at {start:>2}:", codec.serialize_window(window))
