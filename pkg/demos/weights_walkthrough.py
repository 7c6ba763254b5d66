"""Balancing parameter and limiting weights for a two-zero spectral spec.

Run:  python3 demos/weights_walkthrough.py
"""

from fractions import Fraction

from hitchinlab import parweights as pw

spec = pw.spec_from_pairs([(3, 3), (1, 1)], degE=0, d1=1, d2=3)
print("stability:", pw.stability_check(spec))

# chi is nondecreasing and piecewise linear; a* is where the balance vanishes
for x in [Fraction(k, 12) for k in range(0, 7)]:
    print(f"a = {str(x):>5}   balance = {pw.balance(spec, x)}")

wa = pw.weights(spec)
print("a* =", wa.a_star, "  bisection oracle:", float(pw.bisection_a(spec)))
for z in spec.zeros:
    print(f"{z.label}: weights {wa.weight1[z.label]} and {wa.weight2[z.label]} (sum {z.ell})")
print("parabolic degrees:", wa.degree1, wa.degree2)
print()
print(wa.to_csv())
