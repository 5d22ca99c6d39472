"""
Metrics for the MadVM simulator
Per-slot power, shortage, migration and active-PM records with long-run averages
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from loguru import logger

COLUMNS = ['slot', 'power_watts', 'shortage_sum', 'migrations', 'active_pms']


@dataclass
class MetricsReport:
    controller: str
    num_vms: int
    num_pms: int
    lambda_weight: float
    warm_up_slots: int = 0
    rows: List[Dict[str, Any]] = field(default_factory=list)

    def record(self, slot: int, power_watts: float, shortage_sum: float, migrations: int, active_pms: int):
        self.rows.append({
            'slot': int(slot),
            'power_watts': float(power_watts),
            'shortage_sum': float(shortage_sum),
            'migrations': int(migrations),
            'active_pms': int(active_pms),
        })

    @property
    def num_slots(self) -> int:
        return len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=COLUMNS)

    def _summarize(self, rows: List[Dict[str, Any]]) -> Optional[Dict[str, float]]:
        if not rows:
            return None
        power = np.array([row['power_watts'] for row in rows])
        shortage = np.array([row['shortage_sum'] for row in rows])
        migrations = np.array([row['migrations'] for row in rows], dtype=float)
        active = np.array([row['active_pms'] for row in rows], dtype=float)
        avg_power = float(power.mean())
        avg_shortage_sum = float(shortage.mean())
        return {
            'avg_power': avg_power,
            'avg_shortage_per_vm': avg_shortage_sum / self.num_vms,
            'avg_migrations': float(migrations.mean()),
            'max_migrations': int(migrations.max()),
            'avg_active_pms': float(active.mean()),
            'total_cost': avg_power + self.lambda_weight / self.num_vms * avg_shortage_sum,
            'num_slots': len(rows),
        }

    @property
    def aggregates(self) -> Optional[Dict[str, float]]:
        """Full-horizon averages"""
        return self._summarize(self.rows)

    @property
    def post_warm_up(self) -> Optional[Dict[str, float]]:
        """Averages with the first warm_up_slots excluded"""
        return self._summarize([row for row in self.rows if row['slot'] >= self.warm_up_slots])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'controller': self.controller,
            'num_vms': self.num_vms,
            'num_pms': self.num_pms,
            'lambda_weight': self.lambda_weight,
            'warm_up_slots': self.warm_up_slots,
            'num_slots': self.num_slots,
            'aggregates': self.aggregates,
            'post_warm_up': self.post_warm_up,
        }

    def write_csv(self, path: str):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format='%.9f')

    def write_json(self, path: str):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def save(self, output_dir: str, name: str) -> Dict[str, str]:
        out = Path(output_dir)
        csv_path, json_path = out / f"{name}_slots.csv", out / f"{name}_summary.json"
        self.write_csv(str(csv_path))
        self.write_json(str(json_path))
        logger.info(f"Report written to {csv_path} and {json_path}")
        return {'slots': str(csv_path), 'summary': str(json_path)}

    def show_summary(self):
        """Display run averages"""
        aggregates = self.aggregates or {}
        print("\n" + "=" * 60)
        print(f"SIMULATION SUMMARY ({self.controller})")
        print("=" * 60)
        print(f"Slots: {self.num_slots:,}  VMs: {self.num_vms}  PMs: {self.num_pms}  lambda: {self.lambda_weight:g}")
        if aggregates:
            print(f"  Average power:        {aggregates['avg_power']:.2f} W")
            print(f"  Shortage per VM:      {aggregates['avg_shortage_per_vm']:.6f}")
            print(f"  Migrations per slot:  {aggregates['avg_migrations']:.3f}")
            print(f"  Active PMs:           {aggregates['avg_active_pms']:.2f}")
            print(f"  Average cost:         {aggregates['total_cost']:.2f}")
        post = self.post_warm_up
        if post and self.warm_up_slots:
            print(f"\nAfter {self.warm_up_slots} warm-up slots:")
            print(f"  Average power:        {post['avg_power']:.2f} W")
            print(f"  Shortage per VM:      {post['avg_shortage_per_vm']:.6f}")
        print("=" * 60 + "\n")


def comparison_table(reports: Dict[str, MetricsReport]) -> pd.DataFrame:
    """Aggregates per controller, with power saving relative to every other controller"""
    rows = []
    for name, report in reports.items():
        row = {'controller': name}
        row.update(report.aggregates or {})
        rows.append(row)
    table = pd.DataFrame(rows).set_index('controller')
    for baseline in table.index:
        table[f"saving_vs_{baseline}"] = 1.0 - table['avg_power'] / table.loc[baseline, 'avg_power']
    return table
