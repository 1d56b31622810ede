"""
swarm-markers - HTML Summary
Renders the pipeline's report tables into a single summary.html with Jinja2.
"""

import logging
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Union

import pandas as pd
from jinja2 import Environment, FileSystemLoader, select_autoescape
from markupsafe import Markup

from artifacts import atomic_write

logger = logging.getLogger(__name__)

# Display titles; tables not listed keep their file name
TABLE_TITLES = {
    "representation": "Label representation per split",
    "compute_time": "Marker computation time per window plan",
    "mi_selection": "Mutual-information marker ranking",
    "marker_correlation_pairs": "Highly correlated marker pairs",
    "ablation_e1": "Ablation: retrain without marker sets",
    "ablation_e2": "Ablation: impute marker sets in the fixed model",
    "association_stats": "Agent association per scenario (%)",
    "association_by_type": "Agent association per profile (%)",
    "attention_stats": "Attention points per scenario (%)",
    "attention_by_type": "Attention points per profile (%)",
}


class ReportGenerator:
    def __init__(self, template_dir: Path):
        self.template_dir = Path(template_dir)
        self.env = Environment(
            loader=FileSystemLoader(str(self.template_dir)),
            autoescape=select_autoescape(["html", "xml"]),
            keep_trailing_newline=True,
        )
        self.env.filters["truncate"] = self._truncate_filter
        self.env.filters["percent"] = self._percent_filter

    # -------------------------
    # Filters
    # -------------------------

    @staticmethod
    def _truncate_filter(text: Optional[str], length: int = 80) -> str:
        """Cut at the last word boundary before length and append '...'."""
        if text is None:
            return ""
        text = str(text)
        if len(text) <= length:
            return text
        cut = text[:length]
        if " " in cut:
            cut = cut[: cut.rfind(" ")]
        return cut.rstrip() + "..."

    @staticmethod
    def _percent_filter(value: Any, digits: int = 1) -> str:
        try:
            number = float(value)
        except (TypeError, ValueError):
            return ""
        if math.isnan(number):
            return "n/a"
        return f"{number * 100:.{digits}f}%"

    # -------------------------
    # Payload
    # -------------------------

    def _prepare_payload(self, data: Dict[str, Any]) -> Dict[str, Any]:
        """Fill metadata defaults and turn DataFrames into HTML fragments."""
        payload = dict(data)
        payload.setdefault("generated_at", datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M:%S UTC"))
        chain = payload.get("chain") or ""
        payload.setdefault("report_id", chain[:12] if chain else datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S"))

        sections = []
        for name, table in (payload.get("tables") or {}).items():
            if isinstance(table, pd.DataFrame):
                html = table.to_html(index=False, na_rep="n/a", float_format=lambda v: f"{v:.4f}", border=0)
                rows = len(table)
            else:
                html, rows = str(table), None
            sections.append({
                "name": name,
                "title": TABLE_TITLES.get(name, name.replace("_", " ")),
                "html": Markup(html),
                "rows": rows,
            })
        payload["sections"] = sections
        return payload

    # -------------------------
    # Rendering
    # -------------------------

    def render_html(self, data: Dict[str, Any], template: str = "report.html") -> str:
        payload = self._prepare_payload(data)
        return self.env.get_template(template).render(**payload)

    def generate_html(self, data: Dict[str, Any], output_path: Union[str, Path]) -> Path:
        """
        Render and write the summary atomically.

        Raises:
            jinja2.TemplateError: If the template is missing or broken
        """
        html = self.render_html(data)
        path = atomic_write(output_path, html)
        logger.info(f"summary written: {path}")
        return path
