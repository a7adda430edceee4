"""
Trim Service
Orchestrates program trimming: trace tuples in, trimmed program and final-ACC report out
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

from .acdl import AcConfig, load_config
from .datastate import DataState, OverlayStore
from .domain import Request
from .errors import ACTestError, ManifestError, TrimError
from .hir import IrProgram
from .interpreter import interpret
from .trimmer import (
    AccSet, BackwardMode, TraceTuple, find_final_acc, find_final_accs, run_pair, trim_advanced,
    trim_strawman,
)

logger = logging.getLogger(__name__)


class TrimService:
    """Service for identifying final ACCs and trimming handler programs"""

    @staticmethod
    def load_tuples(path) -> List[TraceTuple]:
        """
        Load trace tuples from JSON

        Format: {"tuples": [{"request": {...}, "cfg_allow": "a.conf", "cfg_deny": "d.conf"}]}
        Config paths are relative to the tuple file.

        Raises:
            ManifestError: the file is unreadable or fails validation
        """
        from .serializers import TraceTupleFileSerializer

        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ManifestError(f"Cannot read trace tuples {path}: {e}") from e
        if isinstance(raw, list):
            raw = {"tuples": raw}

        serializer = TraceTupleFileSerializer(data=raw)
        if not serializer.is_valid():
            raise ManifestError(f"Invalid trace tuples {path}: {serializer.errors}")

        configs: Dict[str, AcConfig] = {}

        def config_at(name: str) -> AcConfig:
            if name not in configs:
                configs[name] = load_config(path.parent / name)
            return configs[name]

        tuples = [
            TraceTuple(
                request=item["request"],
                cfg_allow=config_at(item["cfg_allow"]),
                cfg_deny=config_at(item["cfg_deny"]),
            )
            for item in serializer.validated_data["tuples"]
        ]
        logger.info(f"Loaded {len(tuples)} trace tuples from {path}")
        return tuples

    @staticmethod
    def identify(
        prog: IrProgram,
        tuples: Iterable[TraceTuple],
        lower: DataState,
        mode: BackwardMode = BackwardMode.PRIOR,
        seeds: Tuple[int, int] = (0, 0),
    ) -> Tuple[AccSet, List[Dict[str, Any]]]:
        """
        Run CFG-diff on every tuple and complete the result with static analysis

        Returns:
            (final ACCs, per-tuple details with the CFG-diff winner and coloring)
        """
        store = OverlayStore(lower)
        pairs = []
        details = []
        for tuple_ in tuples:
            cfg_allow, cfg_deny = run_pair(prog, tuple_, store, seeds=seeds)
            acc, merged = find_final_acc(cfg_allow, cfg_deny, prog)
            pairs.append((acc, merged))
            details.append({
                "request": tuple_.request.to_dict(),
                "final_acc": acc.to_dict(),
                "coloring": merged.summary(),
            })
        if not pairs:
            raise TrimError("Advanced trimming needs at least one trace tuple")

        finals = find_final_accs(pairs, prog, mode)
        return finals, details

    @staticmethod
    def advanced(
        prog: IrProgram,
        tuples: Iterable[TraceTuple],
        lower: DataState,
        mode: BackwardMode = BackwardMode.PRIOR,
    ) -> Tuple[IrProgram, AccSet, Dict[str, Any]]:
        """
        Full advanced pipeline: run_pair, find_final_acc, find_final_accs, trim_advanced

        Returns:
            (trimmed program, final ACCs, AccSet report)
        """
        finals, details = TrimService.identify(prog, tuples, lower, mode)
        trimmed = trim_advanced(prog, finals)
        report = TrimService.acc_report(finals, details, mode)
        logger.info(f"Advanced trim finished: {len(finals)} final ACCs {finals.check_ids()}")
        return trimmed, finals, report

    @staticmethod
    def strawman(prog: IrProgram) -> IrProgram:
        return trim_strawman(prog)

    @staticmethod
    def acc_report(finals: AccSet, details: List[Dict[str, Any]], mode=BackwardMode.PRIOR) -> Dict[str, Any]:
        return {
            "mode": BackwardMode(mode).value,
            "final_accs": finals.to_json(),
            "tuples": details,
        }

    @staticmethod
    def verify_trim(
        original: IrProgram,
        trimmed: IrProgram,
        configs: Iterable[AcConfig],
        lower: DataState,
        requests: Iterable[Request],
        step_budget: Optional[int] = None,
    ) -> List[Dict[str, Any]]:
        """
        Decision-preservation oracle

        Every request runs on its own fresh overlay under both programs, for
        every config. Returns one mismatch record per differing decision.
        """
        store = OverlayStore(lower)
        requests = list(requests)
        mismatches = []
        checked = 0
        for cfg in configs:
            for req in requests:
                outcomes = []
                for prog in (original, trimmed):
                    store.reset()
                    try:
                        outcomes.append(interpret(prog, req, cfg, store, step_budget=step_budget).decision.value)
                    except ACTestError as e:
                        outcomes.append(f"error: {e}")
                store.reset()
                checked += 1
                if outcomes[0] != outcomes[1]:
                    mismatches.append({
                        "config": cfg.config_id,
                        "request": req.to_dict(),
                        "original": outcomes[0],
                        "trimmed": outcomes[1],
                    })

        if mismatches:
            logger.warning(f"Trim verification: {len(mismatches)} of {checked} decisions differ")
        else:
            logger.info(f"Trim verification: all {checked} decisions preserved")
        return mismatches
