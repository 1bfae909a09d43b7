"""CTC on a lattice small enough to enumerate by hand.

Run: python3 demos/ctc_and_decoders.py
"""

import math

import numpy as np

from htrkd.ctc import beam_search, ctc_log_prob, greedy_decode, viterbi_align
from htrkd.oracles import brute_force_log_prob, string_posteriors

# Two frames, blank plus one letter, every row uniform. Paths "a-", "-a" and
# "aa" all collapse to "a", so p("a") = 3/4.
lp = np.log(np.full((2, 2), 0.5))
print("log p('a')      :", ctc_log_prob(lp, [1]), " expected", math.log(0.75))
print("log p('aa')     :", ctc_log_prob(lp, [1, 1]), " (needs a separating blank, so 3 frames)")

rng = np.random.default_rng(0)
lat = np.log(rng.dirichlet(np.ones(3), size=3))
post = string_posteriors(lat)
print("\nexact string posteriors on a random T=3, V=3 lattice:")
for s, p in sorted(post.items(), key=lambda kv: -kv[1]):
    print(f"  {''.join('-ab'[i] for i in s) or '<empty>':8s} {p:.4f}")
print("forward-backward vs enumeration for 'ab':", ctc_log_prob(lat, [1, 2]), brute_force_log_prob(lat, [1, 2]))
print("greedy          :", greedy_decode(lat, ["", "a", "b"]) or "<empty>")
print("beam, width 1   :", "".join("-ab"[i] for i in beam_search(lat, 1)[0][0]) or "<empty>")
print("beam, full width:", "".join("-ab"[i] for i in beam_search(lat, len(post))[0][0]) or "<empty>")
print("viterbi frames for 'ab':", viterbi_align(lat, [1, 2]).tolist())
