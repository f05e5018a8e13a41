import numpy as np

from artifact.eigen import adjacency_eigensystem
from artifact.graphs import build_named, geometry_profile, random_regular
from artifact.kernels import PathComplex, diagonal_kernel, operator_selftest
from artifact.nonbacktracking import nb_spectrum_correspondence
from artifact.tree import green_tree_limit, spherical_phi_table
from artifact.variance import balanced_sign_observable, decay_experiment, km_compare

# Two small fixtures: Petersen (girth 5) and Heawood (girth 6, bipartite)
for name in ("petersen", "heawood"):
    g = build_named(name)
    prof = geometry_profile(g)
    print(name, "n =", g.n, "girth =", prof.girth, "bipartite =", g.is_bipartite)

# Operator identities on the path spaces hold to rounding
print(operator_selftest(build_named("petersen")))

# Non-backtracking spectrum predicted from the adjacency spectrum
g = build_named("heawood")
rep = nb_spectrum_correspondence(g, adjacency_eigensystem(g))
print("heawood pairing error", rep.max_error)

# Imaginary part of the tree Green function, normalised, is the spherical function
d = np.arange(7)
val = green_tree_limit(2, 1.0, d).value
print(np.round(val.imag / val[0].imag, 8))
print(np.round(spherical_phi_table(2, 1.0, 6), 8))

# A random 3-regular graph already looks like Kesten-McKay at n = 1000
g = random_regular(1000, 3, 1)
print("sup-CDF distance", km_compare(g.q, adjacency_eigensystem(g).lambdas).distance)

# Variance of a balanced sign observable decays with n
family = [(g := random_regular(n, 3, 2), adjacency_eigensystem(g)) for n in (100, 200, 400, 800)]
gen = lambda g, space, eig: diagonal_kernel(space, balanced_sign_observable(g.n, 11))
table = decay_experiment(family, gen)
for row in table.as_rows():
    print(row)
