"""Monte Carlo solver for mixed Robin/Dirichlet terminal-boundary problems
on time-varying domains, built on oblique reflecting diffusions with boundary
local time, plus a finite-difference oracle, shape identification, and a
Bayesian inverse layer."""

__version__ = "0.1.0"
