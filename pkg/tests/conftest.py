import numpy as np

from octad.store import Manifest, SubjectRecord


def random_manifest(seed: int, n_ad: int | None = None, n_cn: int | None = None) -> Manifest:
    """Random cohort of 1- or 2-eye subjects with a control pool large
    enough that every AD subject has an exact demographic twin."""
    g = np.random.default_rng(seed)
    n_ad = int(g.integers(6, 25)) if n_ad is None else n_ad
    n_cn = n_ad + int(g.integers(0, 15)) if n_cn is None else n_cn
    rows = []
    demos = []
    for i in range(n_ad + n_cn):
        ad = i < n_ad
        if ad or i - n_ad >= n_ad:
            demo = (int(g.integers(55, 80)), str(g.choice(["F", "M"])), int(g.integers(0, 2)))
        else:
            demo = demos[i - n_ad]
        demos.append(demo)
        age, sex, inst = demo
        eyes = ["L", "R"] if g.random() < 0.5 else [str(g.choice(["L", "R"]))]
        for eye in eyes:
            years = float(g.uniform(0, 6)) if ad else None
            rows.append(SubjectRecord(f"S{i:03d}", eye, age, sex, inst, years,
                                      "AD" if ad else "CN", f"{i}_{eye}.oct"))
    return Manifest(tuple(rows))
