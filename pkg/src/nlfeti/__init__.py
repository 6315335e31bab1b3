"""Meshfree FETI-style solver toolkit for 2D finite-horizon nonlocal Poisson
problems: lattice construction, nonlocal domain decomposition, multiplicity-
weighted assembly, a projected preconditioned CG on the Lagrange-multiplier
system, and a benchmark harness for scaling experiments."""

from nlfeti.grid import build_lattice, enumerate_constraints, partition, zeta_values
from nlfeti.assembly import (Kernel, assemble_coarse, assemble_global,
                             assemble_subdomain, nullspace_basis, scaling_constant)
from nlfeti.linalg import (NotPositiveDefiniteError, PseudoInverseOperator,
                           SchurOperator, cg, factorize_spd, pseudo_apply,
                           schur_apply)
from nlfeti.runtime import (Topology, build_topology, coarse_reduce,
                            halo_exchange, make_backend, scalar_allreduce)
from nlfeti.solver import (ReducedSystem, apply_K, apply_P0,
                           apply_preconditioner, build_reduced_system,
                           projected_pcg, recover_primal)
from nlfeti.kernels import backend_name as kernel_backend_name

__version__ = "0.1.0"
