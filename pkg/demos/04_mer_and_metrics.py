"""MER scoring and the four continual-learning metrics.

MER = (S + D + I) / (H + S + D + I) stays in [0, 1] even when the
hypothesis is longer than the reference, which keeps averages across
episodes well-behaved.
"""

from clbench.metrics import MerMatrix, ReferenceDiagonals, amer, bwt, combine, fwt, im, mer

ref = "the cat sat on the mat".split()
hyp = "the cat sit on mat today".split()
score = mer(ref, hyp)
print(f"ref: {ref}\nhyp: {hyp}")
print(f"H={score.hits} S={score.substitutions} D={score.deletions} I={score.insertions}"
      f"  mer={score.mer:.3f}")

print(f"\nempty hypothesis: mer={mer(ref, []).mer}")
print(f"hypothesis with no reference: mer={mer([], hyp).mer}")

# corpus scoring pools counts, then takes one ratio
utterances = [(["a", "b"], ["a", "b"]), (["a", "b", "c"], ["x", "b", "c", "d"])]
pooled = combine(mer(r, h) for r, h in utterances)
print(f"\ncorpus MER over {len(utterances)} utterances: {pooled.mer:.3f}")

# a hand-made 4-episode experiment: the model forgets episode 0 slowly
matrix = MerMatrix(
    [
        [0.20],
        [0.24, 0.30],
        [0.27, 0.33, 0.28],
        [0.30, 0.36, 0.31, 0.26],
    ]
)
refs = ReferenceDiagonals(
    incft=[0.20, 0.32, 0.30, 0.29],   # plain sequential finetuning diagonal
    jointft=[0.20, 0.26, 0.24, 0.22],  # retrained-on-everything diagonal
)
diag = matrix.diagonal()
print("\n t   amer     fwt     bwt      im")
for t in range(4):
    a = amer(matrix, t)
    f = fwt(diag, refs, t) if t else float("nan")
    b = bwt(matrix, t) if t else float("nan")
    i = im(diag, refs, t)
    print(f" {t}  {a:.4f}  {f:+.4f} {b:+.4f} {i:+.4f}")
print("\nnegative bwt = forgetting; positive fwt = beats plain finetuning on the")
print("new episode; positive im = lags a jointly trained model (plasticity gap)")
