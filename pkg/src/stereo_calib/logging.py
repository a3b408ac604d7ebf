"""
Console logging for the calibrator using Rich.
Stage progress, solver summaries, tracking rates and recovered parameters are rendered as
panels and tables; free-form messages are filtered by LOG_LEVEL.
"""

import os
from datetime import datetime
from functools import wraps
from typing import TYPE_CHECKING, Any, Callable, Dict, List, Optional, Sequence

from dotenv import load_dotenv
from rich import box
from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

if TYPE_CHECKING:
    from .models import SpatiotemporalParams, TrackingStats
    from .solver import SolverReport

load_dotenv()

LEVELS = {"DEBUG": 0, "INFO": 1, "WARNING": 2, "ERROR": 3}


def log_level_check(level: str) -> Callable[[Callable], Callable]:
    """Decorator to check log level before executing method"""

    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(self: "CalibrationLogger", *args: Any, **kwargs: Any) -> Any:
            if not self._should_log(level):
                return None
            return func(self, *args, **kwargs)

        return wrapper

    return decorator


class CalibrationLogger:
    """Rich console logger for the calibration pipeline"""

    def __init__(self, verbose: bool = True, console: Optional[Console] = None):
        self.console = console or Console(stderr=True)
        self.verbose = verbose
        self.log_level = os.getenv("LOG_LEVEL", "INFO").upper()

    def _should_log(self, level: str) -> bool:
        """Check if message should be logged based on level"""
        return LEVELS.get(level, 1) >= LEVELS.get(self.log_level, 1)

    def set_level(self, level: str) -> None:
        level = level.upper()
        if level not in LEVELS:
            raise ValueError(f"unknown log level '{level}'")
        self.log_level = level

    def _get_emoji(self, kind: str, key: Any = None) -> str:
        if kind == "stage":
            stage_map = {
                "tracking": "🎯",
                "reference": "🧭",
                "pnp": "📐",
                "trajectory": "〰️",
                "hand_eye": "🤝",
                "bundle_adjustment": "🧮",
                "report": "📝",
            }
            return stage_map.get(key, "⚙️")
        if kind == "termination":
            return "✅" if key in ("function_tolerance", "gradient_tolerance") else "⚠️"
        if kind == "command":
            command_map = {"simulate": "🎲", "calibrate": "📷", "evaluate": "📊"}
            return command_map.get(key, "📷")
        return "📊"

    def _create_table(
        self,
        title: str,
        columns: Sequence[tuple],
        rows: Sequence[Any],
        row_builder: Callable[[Any], tuple],
    ) -> Table:
        """Shared table builder"""
        table = Table(title=title, box=box.ROUNDED)
        for col_name, style, justify in columns:
            table.add_column(col_name, style=style, justify=justify, no_wrap=(justify == "left"))
        for item in rows:
            table.add_row(*row_builder(item))
        return table

    @log_level_check("INFO")
    def log_startup(self, command: str) -> None:
        emoji = self._get_emoji("command", command)
        panel = Panel.fit(
            f"{emoji}  [bold blue]Stereo Spatiotemporal Calibrator[/bold blue]\n"
            f"Command: {command}\n"
            f"Started at: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}",
            box=box.DOUBLE,
            style="blue",
        )
        self.console.print(panel)

    @log_level_check("INFO")
    def log_stage_start(self, stage: str) -> None:
        emoji = self._get_emoji("stage", stage)
        self.console.print(f"{emoji} [bold]{stage.replace('_', ' ').title()}[/bold] ...")

    @log_level_check("INFO")
    def log_stage_done(
        self, stage: str, seconds: float, details: Optional[Dict[str, Any]] = None
    ) -> None:
        message = f"   [green]done[/green] {stage} in {seconds:.2f} s"
        if details:
            message += " (" + ", ".join(f"{k}: {v}" for k, v in details.items()) + ")"
        self.console.print(message)

    @log_level_check("INFO")
    def log_tracking_stats(self, stats: Sequence["TrackingStats"]) -> None:
        if not stats:
            return
        columns = [
            ("Camera", "cyan", "left"),
            ("Frames", "white", "right"),
            ("Complete", "green", "right"),
            ("Incomplete", "yellow", "right"),
            ("Total", "magenta", "right"),
        ]

        def build_row(s: "TrackingStats") -> tuple:
            return (
                s.camera_id,
                str(s.frame_count),
                f"{s.complete} ({100 * s.complete_rate:.2f}%)",
                f"{s.incomplete} ({100 * s.incomplete_rate:.2f}%)",
                f"{s.total} ({100 * s.total_rate:.2f}%)",
            )

        self.console.print(self._create_table("🎯  Grid Tracking", columns, stats, build_row))

    @log_level_check("INFO")
    def log_solver_report(self, name: str, report: "SolverReport") -> None:
        emoji = self._get_emoji("termination", report.termination)
        columns = [("Quantity", "cyan", "left"), ("Value", "white", "right")]
        rows = [
            ("Initial cost", f"{report.initial_cost:.6e}"),
            ("Final cost", f"{report.final_cost:.6e}"),
            ("Iterations", str(report.iterations)),
            ("Termination", f"{emoji} {report.termination}"),
        ]
        rows += [(f"RMS {group}", f"{rms:.4g}") for group, rms in report.group_rms.items()]
        table = self._create_table(f"🧮  Solver: {name}", columns, rows, lambda r: r)
        self.console.print(table)

    @log_level_check("INFO")
    def log_spatiotemporal(self, params: "SpatiotemporalParams", title: str = "Result") -> None:
        roll, pitch, yaw = params.euler_degrees()
        tx, ty, tz = params.translation * 100.0
        text = (
            f"[bold]Rotation (XYZ Euler, deg):[/bold] {roll:+.4f} {pitch:+.4f} {yaw:+.4f}\n"
            f"[bold]Translation (cm):[/bold] {tx:+.4f} {ty:+.4f} {tz:+.4f}\n"
            f"[bold]Time offset (ms):[/bold] {params.time_offset * 1000.0:+.4f}"
        )
        self.console.print(Panel(text, title=f"📷 {title}", box=box.DOUBLE, style="green"))

    @log_level_check("INFO")
    def log_metrics(self, rows: List[Dict[str, str]], title: str = "Calibration Error") -> None:
        """Table of preformatted metric rows sharing the keys of the first row"""
        if not rows:
            return
        keys = list(rows[0].keys())
        columns = [
            (k, "cyan" if i == 0 else "white", "left" if i == 0 else "right")
            for i, k in enumerate(keys)
        ]
        table = self._create_table(
            f"📊  {title}", columns, rows, lambda r: tuple(str(r.get(k, "")) for k in keys)
        )
        self.console.print(table)

    @log_level_check("WARNING")
    def log_warning(self, message: str) -> None:
        self.console.print(f"⚠️  [yellow]WARNING:[/yellow] {message}")

    @log_level_check("DEBUG")
    def log_debug(self, message: str, data: Optional[Dict[str, Any]] = None) -> None:
        """Log debug information"""
        self.console.print(f"🔍 [dim]DEBUG: {message}[/dim]")
        if data and self.verbose:
            for key, value in data.items():
                self.console.print(f"    {key}: {value}")

    @log_level_check("ERROR")
    def log_error(self, error: str, context: Optional[str] = None) -> None:
        """Log errors with context"""
        error_text = f"❌ [red bold]ERROR:[/red bold] {error}"
        if context:
            error_text += f"\n   Context: {context}"
        self.console.print(error_text)

    def create_progress_bar(self, description: str = "Processing") -> Progress:
        """Progress bar for grid searches and batch simulation"""
        return Progress(
            SpinnerColumn(),
            TextColumn(f"[progress.description]{description}"),
            BarColumn(),
            TimeElapsedColumn(),
            console=self.console,
            transient=True,
            disable=not self._should_log("INFO"),
        )


# Global logger instance
logger = CalibrationLogger()
