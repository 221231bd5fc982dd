"""OPF-derived local inverter control curves for low-voltage feeders.

Modules: ``grid_model`` (benchmark feeder), ``profiles`` (day profiles),
``power_flow`` (Newton-Raphson), ``opf`` (per-step AC OPF), ``local_control``
(curves and closed-loop steady state), ``curve_extraction`` (curves from OPF
traces) and ``evaluation`` (method comparison, reports, CLI back end).
"""
__version__ = "0.1.0"
