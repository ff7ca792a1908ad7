"""The attention algebra, step by step, with tiny hand-sized tensors.

Shows the two normalization schemes the listener supports:

* single softmax over segments for one free-form query (the part-name
  agnostic path), and
* the double softmax over (parts, then segments) that makes the part
  maps mutually exclusive (the part-name aware path),

then demonstrates why the order of the two softmaxes matters.

Run from the repository root:

    python demos/attention_walkthrough.py
"""

import torch

from refparts.attention import attend_pn_agnostic, attend_pn_aware


def banner(text):
    print(f"\n--- {text} ---")


def main():
    torch.manual_seed(0)

    banner("single query, single softmax")
    # Three segments with unit-norm keys; one unit-norm query.
    keys = torch.nn.functional.normalize(torch.randn(3, 4), dim=1)
    query = torch.nn.functional.normalize(torch.randn(4), dim=0)
    w = attend_pn_agnostic(query, keys)
    print("logits (bounded by [-1, 1] because everything is unit norm):")
    print((keys @ query).tolist())
    print("attention over segments (sums to 1):", w.tolist())

    banner("two part queries, double softmax")
    queries = torch.nn.functional.normalize(torch.randn(2, 4), dim=1)
    att = attend_pn_aware(queries, keys, mode="pn_then_ss")
    print("per-segment part distribution Y (rows sum to 1):")
    print(att.row_dist)
    print("per-part segment attention W (columns sum to 1):")
    print(att.weights)

    banner("why the order matters")
    swapped = attend_pn_aware(queries, keys, mode="ss_then_pn")
    print("ss_then_pn weights (rows sum to 1 instead):")
    print(swapped.weights)
    print(
        "pn_then_ss makes parts compete for each segment first, so a segment\n"
        "claimed by one part is suppressed in every other part's map. The\n"
        "swapped order loses that exclusivity."
    )

    banner("mask extraction is just a row argmax")
    hard = att.weights.argmax(dim=1)
    print("segment -> part assignment:", hard.tolist())


if __name__ == "__main__":
    main()
