"""Write a deterministic 5,000-quadruple fixture in the ICEWS TSV layout.

Real ICEWS dumps are licensed and not redistributed here; this produces the
same shape: actor names with country qualifiers, CAMEO-style relation phrases,
integer day timestamps, heavy-tailed actor activity and actors appearing over time.
"""
import argparse
from pathlib import Path

import numpy as np

COUNTRIES = ["India", "Nigeria", "Brazil", "Japan", "Egypt", "Mexico", "Kenya", "France", "Turkey",
             "Indonesia", "Pakistan", "Colombia", "Ukraine", "Philippines", "South Africa", "Iran"]
SECTORS = ["Government", "Citizen", "Police", "Military", "Ministry", "Head of Government", "Opposition",
           "Protester", "Media", "Business", "Court Judge", "Party Member"]
RELATIONS = ["Make statement", "Consult", "Express intent to cooperate", "Make an appeal or request",
             "Engage in negotiation", "Host a visit", "Make a visit", "Praise or endorse",
             "Criticize or denounce", "Accuse", "Arrest, detain, or charge with legal action",
             "Use conventional military force", "Demonstrate or rally", "Provide economic aid",
             "Sign formal agreement", "Threaten", "Reject", "Investigate", "Meet at a third location",
             "Express intent to meet or negotiate"]


def make(n_quads: int = 5000, days: int = 60, seed: int = 18) -> list[tuple[str, str, str, int]]:
    rng = np.random.default_rng(seed)
    actors = [f"{s} ({c})" for c in COUNTRIES for s in SECTORS]
    n = len(actors)
    weight = 1.0 / np.arange(1, n + 1) ** 0.9
    weight = weight[rng.permutation(n)]
    debut = np.where(rng.random(n) < 0.6, 0, rng.integers(1, days, n))
    country = np.repeat(np.arange(len(COUNTRIES)), len(SECTORS))
    rel_w = 1.0 / np.arange(1, len(RELATIONS) + 1)
    out = []
    per_day = np.bincount(rng.integers(0, days, n_quads), minlength=days)
    for t in range(days):
        live = np.flatnonzero(debut <= t)
        p = weight[live] / weight[live].sum()
        for _ in range(per_day[t]):
            s = int(rng.choice(live, p=p))
            same = live[country[live] == country[s]]
            pool = same if rng.random() < 0.6 and len(same) > 1 else live
            q = weight[pool] / weight[pool].sum()
            o = s
            while o == s:
                o = int(rng.choice(pool, p=q))
            r = int(rng.choice(len(RELATIONS), p=rel_w / rel_w.sum()))
            out.append((actors[s], RELATIONS[r], actors[o], t))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "data" / "icews_excerpt.tsv"))
    ap.add_argument("--quads", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=18)
    args = ap.parse_args()
    rows = make(args.quads, seed=args.seed)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for s, r, o, t in rows:
            fh.write(f"{s}\t{r}\t{o}\t{t}\n")
    print(f"wrote {len(rows)} quadruples to {args.out}")


if __name__ == "__main__":
    main()
