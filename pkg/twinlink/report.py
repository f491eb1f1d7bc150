"""
Human readable summary of an error report (millimetres, 3 decimals).
"""

import os
from typing import Any, Dict, Optional

from jinja2 import Template

from twinlink.path import TEMPLATE_DIR


def mm(value: Optional[float]) -> str:
    if value is None:
        return 'n/a'
    return f"{value * 1000.0:.3f}"


def summarize(report: Dict[str, Any]) -> str:
    """
    report is the report.json dict
    """
    with open(os.path.join(TEMPLATE_DIR, "summary.txt")) as f:
        tm = Template(f.read())
    g = report['global']
    window = report.get('window', 1.0)
    return tm.render(mm=mm,
                     window_label=f"{window:g}s window",
                     robots=[{'id': rid, 'mean': r['same_time_mean'], 'max': r['same_time_max']}
                             for rid, r in sorted(report['robots'].items(), key=lambda kv: int(kv[0]))],
                     excluded_list=report['excluded'],
                     **g).rstrip() + '\n'
