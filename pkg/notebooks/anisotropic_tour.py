import numpy as np

from artifact.anisotropic import (
    anis_density,
    anis_variance_experiment,
    decay_gap,
    harmonic_cylinders,
    kolmogorov_sum,
    solve_green,
    support_intervals,
)
from artifact.graphs import random_labelled_regular
from artifact.kernels import PathComplex, diagonal_kernel
from artifact.variance import balanced_sign_observable

p = np.array([0.5, 0.3, 0.2])

# Green data at a complex energy: w and one zeta per label
st = solve_green(p, 0.2 + 0.05j)
print("w =", st.w, "zeta =", st.zeta, "residual", st.max_residual)

# Skewed weights open a gap around zero
print("support", support_intervals(p))
tab = anis_density(p, np.linspace(-1, 1, 11))
print(np.round(tab.density, 4))

# Harmonic measure on cylinders is a probability measure
st = solve_green(p, 0.4, side="+")
print("Kolmogorov sum", kolmogorov_sum(st))
print("cylinder consistency", harmonic_cylinders(st, 3).consistency_error())

# The twisted transfer operator contracts
g, bonds = random_labelled_regular(50, 2, 1)
print("decay gap, m = 1:", decay_gap(st, PathComplex(g, bonds), 1))

# Centered variance of a sign observable on a labelled family
family = [random_labelled_regular(n, 2, 7) for n in (100, 200, 400)]
gen = lambda g, space, eig: diagonal_kernel(space, balanced_sign_observable(g.n, 11))
print(anis_variance_experiment(family, p, gen).vars)
