from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """应用配置"""

    # 应用信息
    APP_NAME: str = "中继感知下行调度实验室"
    APP_VERSION: str = "0.3.0"
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "text"

    # 不动点求解器
    SOLVER_DAMPING: float = 0.5
    SOLVER_TOLERANCE: float = 1e-10
    SOLVER_MAX_ITER: int = 100000
    SOLVER_RETRIES: int = 3
    SOLVER_DAMPING_BACKOFF: float = 0.5

    # 容斥展开上限（超过后改用蒙特卡洛估计）
    INCLUSION_EXCLUSION_CAP: int = 20
    MC_FALLBACK_SAMPLES: int = 200000
    MC_FALLBACK_TOLERANCE: float = 1e-3

    # 时隙级蒙特卡洛
    MC_EPSILON: float = 1e-3
    MC_TRACE_EVERY: int = 1000

    # 无线模型
    CQI_FLOOR_DB: float = -6.0
    CQI_STEP_DB: float = 2.0
    PATHLOSS_REF_DB: float = 30.0
    PATHLOSS_EXPONENT: float = 3.5
    MIN_DISTANCE_M: float = 1.0
    NOISE_FLOOR_DBM: float = -95.0
    DONOR_POWER_DBM: float = 46.0
    RELAY_POWER_DBM: float = 30.0

    # 系统级仿真
    RELAY_BUFFER_BYTES: int = 1_000_000
    RB_COUNT: int = 50
    SYMBOLS_PER_RB: int = 150
    SIM_PF_EPSILON: float = 0.05
    COMPARE_TIE_TOLERANCE: float = 0.01

    # 命令行
    DEFAULT_JOBS: int = 1
    OUTPUT_DIR: str = "./out"

    class Config:
        env_file = ".env"
        case_sensitive = True


settings = Settings()
