"""Synthetic files in the UCI household power text layout."""

from datetime import datetime, timedelta

import numpy as np

HEADER = ("Date;Time;Global_active_power;Global_reactive_power;Voltage;"
          "Global_intensity;Sub_metering_1;Sub_metering_2;Sub_metering_3\n")


def write_uci(path, n_rows, seed=0, start=datetime(2006, 12, 16, 17, 24), skip=(), missing=(), bad=()):
    """Write ``n_rows`` minute rows; ``skip`` drops minutes, ``missing`` maps
    row -> field index set to ``?``, ``bad`` replaces rows with garbage."""
    rng = np.random.default_rng(seed)
    missing = dict(missing)
    with open(path, "w") as fh:
        fh.write(HEADER)
        for i in range(n_rows):
            if i in skip:
                continue
            if i in bad:
                fh.write("not;a;valid;row\n")
                continue
            t = start + timedelta(minutes=i)
            vals = [f"{v:.3f}" for v in rng.uniform(0.1, 10.0, 7)]
            if i in missing:
                vals[missing[i]] = "?"
            fh.write(f"{t:%d/%m/%Y};{t:%H:%M:%S};" + ";".join(vals) + "\n")
    return path
