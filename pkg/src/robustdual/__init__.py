"""Provable robustness bounds for networks with skip connections."""
from .tensor import Tensor, Tape, gradcheck
from .netgraph import (Add, BatchNormFixed, Conv2d, GraphError, HardTanh, LayerSpec, Linear,
                       NetworkGraph, ReLU, forward, predict, validate)
from .autodual import build_dual, dual_backward, objective
from .projest import ProjectionPlan, TailPlan, plan_tail
from .certifier import BallSpec, Certificate, attack_oracle, certify, certify_high_prob, \
    epsilon_l2_equivalent, robust_error, robust_objective

__version__ = "0.1.0"
