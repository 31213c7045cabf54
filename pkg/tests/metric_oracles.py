"""Independent brute-force metric implementations used as test oracles.

Written in a deliberately different style from the package implementation
(dict loops, no shared helpers) so a common bug cannot hide in both paths.
"""

import math


def oracle_bleu(hyps, refs, max_n=4):
    clipped = {}
    total = {}
    c_len = 0
    r_len = 0
    for hyp, ref in zip(hyps, refs):
        c_len += len(hyp)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            hcounts = {}
            for i in range(len(hyp) - n + 1):
                g = tuple(hyp[i:i + n])
                hcounts[g] = hcounts.get(g, 0) + 1
            rcounts = {}
            for i in range(len(ref) - n + 1):
                g = tuple(ref[i:i + n])
                rcounts[g] = rcounts.get(g, 0) + 1
            for g, c in hcounts.items():
                clipped[n] = clipped.get(n, 0) + min(c, rcounts.get(g, 0))
            total[n] = total.get(n, 0) + max(0, len(hyp) - n + 1)
    if c_len == 0:
        return [0.0] * max_n
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    out = []
    for k in range(1, max_n + 1):
        logs = 0.0
        for n in range(1, k + 1):
            m_n = clipped.get(n, 0)
            t_n = total.get(n, 0)
            p = (m_n / t_n) if t_n > 0 and m_n > 0 else 1e-9
            logs += math.log(p)
        out.append(bp * math.exp(logs / k))
    return out


def oracle_rouge_l(hyps, refs):
    def lcs(a, b):
        table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
        for i in range(1, len(a) + 1):
            for j in range(1, len(b) + 1):
                if a[i - 1] == b[j - 1]:
                    table[i][j] = table[i - 1][j - 1] + 1
                else:
                    table[i][j] = max(table[i - 1][j], table[i][j - 1])
        return table[-1][-1]

    acc = 0.0
    for hyp, ref in zip(hyps, refs):
        l = lcs(list(hyp), list(ref))
        if l == 0:
            continue
        prec = l / len(hyp)
        rec = l / len(ref)
        beta2 = 1.2
        acc += (1 + beta2) * prec * rec / (rec + beta2 * prec)
    return acc / len(hyps)


def oracle_cider(hyps, refs):
    n_docs = len(refs)
    score = 0.0
    for n in range(1, 5):
        df = {}
        for ref in refs:
            seen = set()
            for i in range(len(ref) - n + 1):
                seen.add(tuple(ref[i:i + n]))
            for g in seen:
                df[g] = df.get(g, 0) + 1

        def vec(seq):
            counts = {}
            for i in range(len(seq) - n + 1):
                g = tuple(seq[i:i + n])
                counts[g] = counts.get(g, 0) + 1
            return {g: c * (math.log(n_docs) - math.log(max(1.0, df.get(g, 0))))
                    for g, c in counts.items()}

        for hyp, ref in zip(hyps, refs):
            vh = vec(hyp)
            vr = vec(ref)
            num = sum(v * vr.get(g, 0.0) for g, v in vh.items())
            nh = math.sqrt(sum(v * v for v in vh.values()))
            nr = math.sqrt(sum(v * v for v in vr.values()))
            if nh > 0 and nr > 0:
                score += num / (nh * nr)
    return 10.0 * score / (4 * n_docs)
