"""noem: hybrid finite-element / neural-operator-element PDE solver.

The package couples classical piecewise-linear finite elements with
pretrained Dirichlet-to-solution neural operators ("neural-operator
elements", NOEs) that each cover a whole subdomain.  The global solution
is found by minimizing the discrete energy functional over the combined
coefficient vector with a damped Newton method.

Subpackages / modules:

- ``mesh``       meshes partitioned into FE cells and NOE subdomains
- ``fem``        element energies, reference FEM solves, error norms
- ``tensor``     minimal dense-tensor autodiff engine (tape + duals)
- ``operators``  DeepONet / MIONet models and hard-constraint wrappers
- ``training``   full-batch Adam with early stopping
- ``sampling``   Gaussian-process and parametric function-space samplers
- ``datagen``    subdomain dataset generation and persistence
- ``solver``     NOE energy assembly and the damped Newton loop
- ``experiments``  config-driven experiment harness
- ``cli``        command-line entry point
"""

__version__ = "0.1.0"
