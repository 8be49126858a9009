"""Tabulates -[g ln s + (1-g) ln(1-s)], s = 1/(1+e^-z), at 50 significant
digits for z = -30.0, -29.9, ..., 30.0 and g in {0, 1}."""
from mpmath import mp, mpf, exp, log

mp.dps = 50
print("z,g,loss")
for i in range(601):
    z = mpf(-300 + i) / 10
    s = 1 / (1 + exp(-z))
    for g in (0, 1):
        loss = -(g * log(s) + (1 - g) * log(1 - s))
        print(f"{mp.nstr(z, 4)},{g},{mp.nstr(loss, 25)}")
