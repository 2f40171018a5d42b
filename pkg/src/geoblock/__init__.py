"""Geodesics, blocking sets and insecurity witnesses on Riemannian 2-tori."""

from .blocking import (
    BlockingQuery,
    InsecurityCertificate,
    build_certificate,
    check_S_conditions,
    is_blocking_set,
    midpoint_classes,
    verify_certificate,
)
from .connector import ConnectionSet, find_geodesics, flat_torus_oracle, next_new_geodesic
from .geodesicflow import (
    GeodesicSegment,
    conjugacy,
    d_exp,
    exp_map,
    integrate_from_angle,
    integrate_geodesic,
    jacobi_field,
)
from .kernels import BACKEND
from .metricfield import (
    Bump,
    CompositeMetric,
    ConformalBumpMetric,
    FlatMetric,
    load_metric,
    metric_distance,
    metric_from_dict,
    save_metric,
)
from .pipeline import grow_family, stability_probe
from .surgery import avoid_points, destroy_conjugacy, merge_foliations, merge_geodesics

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BlockingQuery",
    "Bump",
    "CompositeMetric",
    "ConformalBumpMetric",
    "ConnectionSet",
    "FlatMetric",
    "GeodesicSegment",
    "InsecurityCertificate",
    "avoid_points",
    "build_certificate",
    "check_S_conditions",
    "conjugacy",
    "d_exp",
    "destroy_conjugacy",
    "exp_map",
    "find_geodesics",
    "flat_torus_oracle",
    "grow_family",
    "integrate_from_angle",
    "integrate_geodesic",
    "is_blocking_set",
    "jacobi_field",
    "load_metric",
    "merge_foliations",
    "merge_geodesics",
    "metric_distance",
    "metric_from_dict",
    "midpoint_classes",
    "next_new_geodesic",
    "save_metric",
    "stability_probe",
    "verify_certificate",
]
