"""
Report Generator - Writes error tables, convergence histories, plot scripts and PDF summaries
"""

import io
import logging
import os
from typing import Dict, Any, List, Optional

import pandas as pd

from src.utils import atomic_write_bytes, atomic_write_text, ensure_directory

try:
    from reportlab.lib.pagesizes import letter
    from reportlab.lib.styles import getSampleStyleSheet, ParagraphStyle
    from reportlab.lib.units import inch
    from reportlab.platypus import SimpleDocTemplate, Paragraph, Spacer, Table, TableStyle
    from reportlab.lib import colors
    REPORTLAB_AVAILABLE = True
except ImportError:
    REPORTLAB_AVAILABLE = False

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"

PLOT_TEMPLATE = '''"""Log-log convergence plot generated next to the history CSVs."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

CURVES = {curves!r}
COLUMNS = {columns!r}

fig, ax = plt.subplots(figsize=(7, 5))
for label, path in CURVES.items():
    frame = pd.read_csv(path)
    for column in COLUMNS:
        if column in frame and frame[column].notna().any():
            ax.loglog(frame["Ndof"], frame[column], marker="o", label=f"{{label}}: {{column}}")
ax.set_xlabel("Ndof")
ax.set_ylabel("error / estimator")
ax.set_title({title!r})
ax.grid(True, which="both", alpha=0.3)
ax.legend(fontsize=8)
fig.tight_layout()
fig.savefig({image!r}, dpi=150)
'''


class ReportGenerator:
    """Generate CSV tables, plot scripts and optional PDF summaries of a study"""

    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        self.reportlab_available = REPORTLAB_AVAILABLE

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    @staticmethod
    def format_table(frame: pd.DataFrame) -> str:
        """Plain-text rendering for stdout"""
        return frame.to_string(index=False, na_rep="", float_format=lambda v: f"{v:.4f}")

    def write_csv(self, frame: pd.DataFrame, name: str) -> str:
        """
        Write a frame atomically (temp file then rename)

        Args:
            frame: table to write
            name: file name inside the output directory

        Returns:
            Path of the written file
        """
        ensure_directory(self.output_dir)
        text = frame.to_csv(index=False, na_rep="", float_format=FLOAT_FORMAT)
        path = atomic_write_text(self.path(name), text)
        logger.info("wrote %s (%d rows)", path, len(frame))
        return path

    def write_history(self, history, name: str) -> str:
        return self.write_csv(history.to_frame(), name)

    def write_plot_script(self, curves: Dict[str, str], name: str, title: str,
                          columns: Optional[List[str]] = None) -> str:
        """
        Emit a standalone matplotlib script plotting CSV columns against Ndof

        Args:
            curves: label -> CSV file name (relative to the output directory)
            name: script file name
            title: plot title
            columns: history columns to draw

        Returns:
            Path of the script
        """
        columns = columns or ["eta_total", "err_u_energy", "err_p_l2", "err_y"]
        image = os.path.splitext(name)[0] + ".png"
        script = PLOT_TEMPLATE.format(curves=curves, columns=columns, title=title, image=image)
        ensure_directory(self.output_dir)
        return atomic_write_text(self.path(name), script)

    def generate_pdf(self, table: pd.DataFrame, title: str, metadata: Dict[str, Any]) -> bytes:
        """
        Generate a PDF summary of a study

        Args:
            table: error table or convergence history
            title: report heading
            metadata: run settings listed above the table

        Returns:
            PDF file as bytes
        """
        if not self.reportlab_available:
            raise ImportError(
                "reportlab is required for PDF generation. "
                "Install it with: pip install reportlab"
            )

        buffer = io.BytesIO()
        doc = SimpleDocTemplate(buffer, pagesize=letter, invariant=1)
        story = []
        styles = getSampleStyleSheet()

        title_style = ParagraphStyle(
            'StudyTitle',
            parent=styles['Heading1'],
            fontSize=20,
            textColor=colors.HexColor('#1f77b4'),
            spaceAfter=20
        )
        story.append(Paragraph(title, title_style))
        story.append(Spacer(1, 0.1*inch))

        story.append(Paragraph("Settings", styles['Heading2']))
        for key, value in metadata.items():
            story.append(Paragraph(f"{key}: {value}", styles['Normal']))
        story.append(Spacer(1, 0.2*inch))

        story.append(Paragraph("Results", styles['Heading2']))
        data = [list(table.columns)]
        for row in table.itertuples(index=False):
            data.append(["" if pd.isna(v) else (f"{v:.4g}" if isinstance(v, float) else str(v)) for v in row])
        results = Table(data)
        results.setStyle(TableStyle([
            ('BACKGROUND', (0, 0), (-1, 0), colors.grey),
            ('TEXTCOLOR', (0, 0), (-1, 0), colors.whitesmoke),
            ('ALIGN', (0, 0), (-1, -1), 'CENTER'),
            ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
            ('FONTSIZE', (0, 0), (-1, -1), 8),
            ('BOTTOMPADDING', (0, 0), (-1, 0), 8),
            ('BACKGROUND', (0, 1), (-1, -1), colors.beige),
            ('GRID', (0, 0), (-1, -1), 1, colors.black)
        ]))
        story.append(results)

        doc.build(story)
        buffer.seek(0)
        return buffer.getvalue()

    def write_pdf(self, table: pd.DataFrame, name: str, title: str, metadata: Dict[str, Any]) -> Optional[str]:
        """Write the PDF summary; warns and skips when reportlab is missing"""
        if not self.reportlab_available:
            logger.warning("reportlab not installed, skipping PDF report")
            return None
        ensure_directory(self.output_dir)
        target = atomic_write_bytes(self.path(name), self.generate_pdf(table, title, metadata))
        logger.info("wrote %s", target)
        return target
