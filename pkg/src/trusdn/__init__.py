"""Deterministic simulator and protocol library for attested SDN trust bootstrapping."""

from .adversary import AdversaryTap, Scenario, ScenarioReport, bundled_scenarios, run_scenario
from .attestation import EpidAuthority, Verdict, Verifier, anti_cuckoo_check, attest_enclave, publish_platform_list
from .bench import BenchConfig, BenchRecord, run_bench, summary_table
from .controller import Controller, GlobalView
from .crypto import DeterministicRandom, KeyRole, hybrid_unwrap, hybrid_wrap, sym_open, sym_seal
from .enclave import Datacenter, EnclaveKind, Platform
from .endpoint import ComputeTaskNode, Mode
from .errors import ParseError, TrusdnError
from .flows import FlowKey, FlowMatch, FlowRule, Packet
from .messages import PskGrant
from .sim import Network, Segment
from .switch import SwitchNode

__version__ = "0.1.0"

__all__ = [
    "AdversaryTap",
    "BenchConfig",
    "BenchRecord",
    "ComputeTaskNode",
    "Controller",
    "Datacenter",
    "DeterministicRandom",
    "EnclaveKind",
    "EpidAuthority",
    "FlowKey",
    "FlowMatch",
    "FlowRule",
    "GlobalView",
    "KeyRole",
    "Mode",
    "Network",
    "Packet",
    "ParseError",
    "Platform",
    "PskGrant",
    "Scenario",
    "ScenarioReport",
    "Segment",
    "SwitchNode",
    "TrusdnError",
    "Verdict",
    "Verifier",
    "anti_cuckoo_check",
    "attest_enclave",
    "bundled_scenarios",
    "hybrid_unwrap",
    "hybrid_wrap",
    "publish_platform_list",
    "run_bench",
    "run_scenario",
    "summary_table",
    "sym_open",
    "sym_seal",
]
