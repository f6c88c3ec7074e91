"""Write tutorials/panel.csv, the input used by the command-line examples."""
from pathlib import Path

import numpy as np

from latentmarkov import ModelParams, simulate_panel, write_panel

T = 5
phi = np.tile([[0.85, 0.15], [0.2, 0.8]], (T, 1, 1))
truth = ModelParams(2, T, (2, 2, 2), ((0,), (1,), (2,)), np.array([0.7, 0.3]),
                    np.tile([[0.9, 0.1], [0.05, 0.95]], (T - 1, 1, 1)), [phi] * 3)
out = Path(__file__).with_name("panel.csv")
write_panel(simulate_panel(truth, 400, seed=2), out)
print(f"wrote {out}")
