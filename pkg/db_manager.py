import logging
from collections import defaultdict
from typing import List, Dict, Any, Optional

from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import sessionmaker

from models import RunRecord, EvalCellRecord, ProbeRecord, init_db

class ResultsDatabase:
    """
    Registry of training arms and their evaluation results.

    Report files on disk stay the source of truth; registry failures are logged
    and reported through return values, never raised into a training or eval run.
    """

    def __init__(self, db_path: str = "results.db"):
        self.db_path = db_path
        self.logger = logging.getLogger('vla.database')
        self._init_database()

    def _init_database(self):
        """Create the tables if they don't exist"""
        try:
            self.engine = init_db(self.db_path)
            self.Session = sessionmaker(bind=self.engine, expire_on_commit=False)
            self.logger.info(f"Results database initialized at {self.db_path}")
        except SQLAlchemyError as e:
            self.logger.error(f"Database initialization error: {e}")
            raise

    def add_run(self, arm: str, checkpoint_path: Optional[str] = None, checkpoint_id: str = "",
                config_hash: str = "", seed: Optional[int] = None, status: str = "pending") -> Optional[int]:
        """Register a run and return its id"""
        try:
            with self.Session() as session:
                run = RunRecord(arm=arm, checkpoint_path=checkpoint_path, checkpoint_id=checkpoint_id,
                                config_hash=config_hash, seed=seed, status=status)
                session.add(run)
                session.commit()
                return run.run_id
        except SQLAlchemyError as e:
            self.logger.error(f"Error adding run {arm}: {e}")
            return None

    def update_run_status(self, run_id: int, status: str) -> bool:
        try:
            with self.Session() as session:
                run = session.get(RunRecord, run_id)
                if run is None:
                    self.logger.warning(f"No run with id {run_id}")
                    return False
                run.status = status
                session.commit()
                return True
        except SQLAlchemyError as e:
            self.logger.error(f"Error updating run {run_id}: {e}")
            return False

    def record_success_report(self, run_id: int, report) -> bool:
        """Store every cell of a SuccessReport under ``run_id`` and mark the run evaluated"""
        try:
            with self.Session() as session:
                for cell in report.cells:
                    session.add(EvalCellRecord(
                        run_id=run_id, task=cell.task, variant=cell.variant, seed=cell.seed,
                        episodes=cell.episodes, successes=cell.successes,
                        format_failures=cell.format_failures, policy_calls=cell.policy_calls,
                        action_steps=cell.action_steps,
                    ))
                run = session.get(RunRecord, run_id)
                if run is not None:
                    run.status = "evaluated"
                session.commit()
                self.logger.debug(f"Recorded {len(report.cells)} eval cells for run {run_id}")
                return True
        except SQLAlchemyError as e:
            self.logger.error(f"Error recording success report for run {run_id}: {e}")
            return False

    def record_probe_report(self, run_id: int, report) -> bool:
        try:
            with self.Session() as session:
                for result in report.results:
                    session.add(ProbeRecord(run_id=run_id, role=result.role, accuracy=result.accuracy,
                                            num_classes=result.num_classes, num_samples=result.test_samples))
                session.commit()
                return True
        except SQLAlchemyError as e:
            self.logger.error(f"Error recording probe report for run {run_id}: {e}")
            return False

    def get_runs(self, arm: Optional[str] = None) -> List[Dict[str, Any]]:
        """Registered runs, newest first, optionally for one arm"""
        try:
            with self.Session() as session:
                query = session.query(RunRecord)
                if arm:
                    query = query.filter(RunRecord.arm == arm)
                runs = query.order_by(RunRecord.run_id.desc()).all()
                return [
                    {"run_id": r.run_id, "arm": r.arm, "checkpoint_path": r.checkpoint_path,
                     "checkpoint_id": r.checkpoint_id, "config_hash": r.config_hash, "seed": r.seed,
                     "status": r.status, "complete": r.is_complete}
                    for r in runs
                ]
        except SQLAlchemyError as e:
            self.logger.error(f"Error getting runs: {e}")
            return []

    def search_cells(self, criteria: Dict[str, Any]) -> List[Dict[str, Any]]:
        """Eval cells filtered by arm, task, variant or seed; ``*`` is a wildcard in text fields"""
        try:
            with self.Session() as session:
                query = session.query(EvalCellRecord, RunRecord.arm).join(RunRecord)
                for key, value in criteria.items():
                    if value is None or value == "":
                        continue
                    column = RunRecord.arm if key == "arm" else getattr(EvalCellRecord, key, None)
                    if column is None:
                        self.logger.warning(f"Ignoring unknown search field {key}")
                        continue
                    if isinstance(value, str) and '*' in value:
                        query = query.filter(column.like(value.replace('*', '%')))
                    else:
                        query = query.filter(column == value)
                rows = query.order_by(EvalCellRecord.cell_id).all()
                self.logger.info(f"Search returned {len(rows)} cells")
                return [
                    {"arm": arm, "run_id": c.run_id, "task": c.task, "variant": c.variant, "seed": c.seed,
                     "episodes": c.episodes, "successes": c.successes, "success_rate": c.success_rate,
                     "format_failures": c.format_failures}
                    for c, arm in rows
                ]
        except SQLAlchemyError as e:
            self.logger.error(f"Database error in search_cells: {e}")
            return []

    def arm_summary(self) -> Dict[str, Dict[str, float]]:
        """Per arm, the mean success rate per variant over all registered cells"""
        rates: Dict[str, Dict[str, List[float]]] = defaultdict(lambda: defaultdict(list))
        for cell in self.search_cells({}):
            rates[cell["arm"]][cell["variant"]].append(cell["success_rate"])
        return {
            arm: {variant: sum(values) / len(values) for variant, values in variants.items()}
            for arm, variants in rates.items()
        }
