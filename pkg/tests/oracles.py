"""Independent reference implementations used by the tests."""

import math


def brute_bleu(hyps, refs):
    """Straightforward reference: list-based n-gram matching, no Counters."""
    match, total = [0] * 4, [0] * 4
    for h, r in zip(hyps, refs):
        for n in range(1, 5):
            hg = [tuple(h[i : i + n]) for i in range(len(h) - n + 1)]
            rg = [tuple(r[i : i + n]) for i in range(len(r) - n + 1)]
            total[n - 1] += len(hg)
            pool = list(rg)
            for g in hg:
                if g in pool:
                    pool.remove(g)
                    match[n - 1] += 1
    hl, rl = sum(map(len, hyps)), sum(map(len, refs))
    p = [match[0] / total[0] if total[0] else 0.0]
    p += [(match[n] / total[n]) if match[n] else 1 / (total[n] + 1) for n in range(1, 4)]
    if hl == 0 or p[0] == 0:
        return 0.0
    bp = 1.0 if hl >= rl else math.exp(1 - rl / hl)
    return 100 * bp * math.exp(sum(map(math.log, p)) / 4)
