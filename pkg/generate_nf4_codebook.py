"""Regenerate the NF4 codebook frozen in formats.py from normal-distribution quantiles."""

import numpy as np
from scipy.stats import norm

# Outermost quantile used by the QLoRA construction
OFFSET = 0.9677083


def create_normal_map(offset=OFFSET):
    """
    Build the 16 NF4 values: 8 positive and 7 negative normal quantiles plus an exact zero.

    Args:
        offset: Probability of the outermost quantile

    Returns:
        Sorted array of 16 values normalized to [-1, 1]
    """
    positive = norm.ppf(np.linspace(offset, 0.5, 9)[:-1])
    negative = -norm.ppf(np.linspace(offset, 0.5, 8)[:-1])
    values = np.sort(np.concatenate([positive, [0.0], negative]))
    # float32 matches the precision the published constants were produced at
    return (values / values.max()).astype(np.float32).astype(np.float64)


if __name__ == "__main__":
    print("NF4_CODEBOOK = np.array([")
    for value in create_normal_map():
        print(f"    {float(value)!r},")
    print("])")
