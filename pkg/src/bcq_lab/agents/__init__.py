from bcq_lab.agents.bc import BcAgent, BcConfig, VaeBcAgent, VaeBcConfig, bc_train, vae_bc_act
from bcq_lab.agents.bcq import BcqAgent, BcqConfig, bcq_act, bcq_target, bcq_train_iteration
from bcq_lab.agents.ddpg import DdpgAgent, DdpgConfig, ddpg_act, ddpg_train_iteration
from bcq_lab.agents.vae import Vae, vae_loss, vae_sample

__all__ = [
    "BcAgent", "BcConfig", "BcqAgent", "BcqConfig", "DdpgAgent", "DdpgConfig", "Vae", "VaeBcAgent", "VaeBcConfig",
    "bc_train", "bcq_act", "bcq_target", "bcq_train_iteration", "ddpg_act", "ddpg_train_iteration", "vae_bc_act",
    "vae_loss", "vae_sample",
]
