"""
Trace Adapter
Reads and writes demand traces and learned chains on disk
"""

import json
from pathlib import Path
from typing import List

import numpy as np
import pandas as pd
from loguru import logger

from core.demand import DemandChain, DemandTrace
from utils.errors import InputError

TRACE_COLUMNS = ['vm_id', 'slot', 'cpu']


def _file_row(index: int) -> int:
    # header is row 1
    return int(index) + 2


class TraceAdapter:
    def __init__(self, path: str):
        self.path = Path(path)

    def load_trace(self) -> DemandTrace:
        """Load a `vm_id,slot,cpu` CSV into a rectangular trace"""
        if not self.path.exists():
            raise InputError(f"Trace file not found: {self.path}")
        try:
            frame = pd.read_csv(self.path, dtype=str, keep_default_na=False, skipinitialspace=True)
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise InputError(f"Malformed trace file {self.path}: {e}")

        if list(frame.columns) != TRACE_COLUMNS:
            raise InputError(f"Trace header must be {','.join(TRACE_COLUMNS)}, got {','.join(frame.columns)}")
        if frame.empty:
            raise InputError(f"Trace file {self.path} has no rows")

        vm_ids = pd.to_numeric(frame['vm_id'], errors='coerce')
        slots = pd.to_numeric(frame['slot'], errors='coerce')
        cpu = pd.to_numeric(frame['cpu'], errors='coerce')
        for name, column in (('vm_id', vm_ids), ('slot', slots), ('cpu', cpu)):
            bad = column.isna()
            if bad.any():
                index = int(np.flatnonzero(bad.to_numpy())[0])
                raise InputError(f"Row {_file_row(index)}: invalid {name} value '{frame[name].iloc[index]}'")
        for name, column in (('vm_id', vm_ids), ('slot', slots)):
            bad = (column < 0) | (column != np.floor(column))
            if bad.any():
                index = int(np.flatnonzero(bad.to_numpy())[0])
                raise InputError(f"Row {_file_row(index)}: {name} must be a non-negative integer")
        negative = (cpu < 0) | ~np.isfinite(cpu)
        if negative.any():
            index = int(np.flatnonzero(negative.to_numpy())[0])
            raise InputError(f"Row {_file_row(index)}: cpu must be a non-negative number, got {cpu.iloc[index]}")

        vm_ids = vm_ids.astype(np.int64).to_numpy()
        slots = slots.astype(np.int64).to_numpy()
        keys = pd.Series(list(zip(vm_ids, slots)))
        duplicated = keys.duplicated()
        if duplicated.any():
            index = int(np.flatnonzero(duplicated.to_numpy())[0])
            raise InputError(f"Row {_file_row(index)}: duplicate entry for vm {vm_ids[index]} slot {slots[index]}")

        num_vms, num_slots = int(vm_ids.max()) + 1, int(slots.max()) + 1
        demands = np.full((num_vms, num_slots), np.nan)
        demands[vm_ids, slots] = cpu.to_numpy()
        missing = np.argwhere(np.isnan(demands))
        if missing.size:
            vm, slot = missing[0]
            raise InputError(f"Trace is missing cpu for vm {vm} at slot {slot} "
                             f"({len(missing)} cells missing in total)")
        trace = DemandTrace(demands)
        logger.info(f"Loaded trace {self.path}: {trace.num_vms} VMs x {trace.num_slots} slots")
        return trace

    def write_trace(self, trace: DemandTrace):
        """Rows sorted by (slot, vm_id), cpu with 9 decimals"""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        slots, vms = np.meshgrid(np.arange(trace.num_slots), np.arange(trace.num_vms), indexing='ij')
        frame = pd.DataFrame({
            'vm_id': vms.ravel(),
            'slot': slots.ravel(),
            'cpu': trace.demands.T.ravel(),
        }, columns=TRACE_COLUMNS)
        frame.to_csv(self.path, index=False, float_format='%.9f')
        logger.info(f"Wrote trace {self.path}: {trace.num_vms} VMs x {trace.num_slots} slots")

    def load_chains(self) -> List[DemandChain]:
        if not self.path.exists():
            raise InputError(f"Chain file not found: {self.path}")
        try:
            with open(self.path, 'r', encoding='utf-8') as f:
                records = json.load(f)
        except json.JSONDecodeError as e:
            raise InputError(f"Malformed chain file {self.path}: {e}")
        if not isinstance(records, list) or not records:
            raise InputError("Chain file must hold a non-empty list of chains")
        return [DemandChain.from_dict(record) for record in records]

    def write_chains(self, chains: List[DemandChain]):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, 'w', encoding='utf-8') as f:
            json.dump([chain.to_dict() for chain in chains], f, indent=2)


def load_trace(path: str) -> DemandTrace:
    return TraceAdapter(path).load_trace()


def write_trace(trace: DemandTrace, path: str):
    TraceAdapter(path).write_trace(trace)
