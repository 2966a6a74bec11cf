from sqlalchemy import create_engine, Column, Float, Integer, String, DateTime, ForeignKey, func
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, relationship

Base = declarative_base()

class RunRecord(Base):
    """One training arm (or stand-in policy) whose results are registered."""
    __tablename__ = 'runs'

    run_id = Column(Integer, primary_key=True, autoincrement=True)
    arm = Column(String, nullable=False)
    checkpoint_path = Column(String)
    checkpoint_id = Column(String)
    config_hash = Column(String)
    seed = Column(Integer)
    status = Column(String, default="pending")  # pending, trained, evaluated, failed
    created_date = Column(DateTime, default=func.now())

    cells = relationship("EvalCellRecord", back_populates="run", cascade="all, delete-orphan")
    probes = relationship("ProbeRecord", back_populates="run", cascade="all, delete-orphan")

    def __repr__(self):
        return f"<RunRecord(run_id={self.run_id}, arm='{self.arm}', status='{self.status}')>"

    @property
    def is_complete(self) -> bool:
        """A run counts as complete once it has been evaluated on at least one cell."""
        return self.status == "evaluated" and bool(self.cells)

class EvalCellRecord(Base):
    """Success counts of one (task, variant, seed) cell."""
    __tablename__ = 'eval_cells'

    cell_id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey('runs.run_id'), nullable=False)
    task = Column(String, nullable=False)
    variant = Column(String, nullable=False)
    seed = Column(Integer, nullable=False)
    episodes = Column(Integer, nullable=False)
    successes = Column(Integer, nullable=False)
    format_failures = Column(Integer, default=0)
    policy_calls = Column(Integer, default=0)
    action_steps = Column(Integer, default=0)

    run = relationship("RunRecord", back_populates="cells")

    def __repr__(self):
        return f"<EvalCellRecord(run_id={self.run_id}, task='{self.task}', variant='{self.variant}')>"

    @property
    def success_rate(self) -> float:
        return self.successes / self.episodes if self.episodes else 0.0

class ProbeRecord(Base):
    """Held-out linear-probe accuracy of one encoder role."""
    __tablename__ = 'probes'

    probe_id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey('runs.run_id'), nullable=False)
    role = Column(String, nullable=False)  # pretrained, frozen, trainable, single, chance
    accuracy = Column(Float, nullable=False)
    num_classes = Column(Integer)
    num_samples = Column(Integer)

    run = relationship("RunRecord", back_populates="probes")

    def __repr__(self):
        return f"<ProbeRecord(run_id={self.run_id}, role='{self.role}', accuracy={self.accuracy:.3f})>"

def init_db(db_path: str = "results.db") -> Engine:
    """Initialize the results database and create all tables."""
    engine = create_engine(f'sqlite:///{db_path}')
    Base.metadata.create_all(engine)
    return engine
