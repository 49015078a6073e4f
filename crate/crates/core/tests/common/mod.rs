#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use drpe_core::equilibrium::PeriodCase;
use drpe_core::follower::{DrpConfig, ResponseMode};
use drpe_core::netmodel::{
    assign_classes, build_loads, parse_network_str, sample_flexibility, ClassSpec, FlexDistribution, LoadProfileSet,
    NetworkOptions,
};
use drpe_core::powerflow::{FlowMeasure, NetworkForms, PfOptions};
use drpe_core::tariff::TariffSchedule;

pub const DESK5: &str = "bus,from,to,r_ohm,x_ohm,p_kw,q_kvar,vmin_pu,vmax_pu,smax_kva
1,,,,,0,0,1.0,1.0,
2,1,2,0.50,0.40,200,100,0.9,1.1,
3,2,3,0.60,0.45,300,150,0.9,1.1,
4,3,4,0.70,0.50,250,120,0.9,1.1,
5,2,5,0.55,0.42,350,200,0.9,1.1,
";

pub const DESK2: &str = "bus,from,to,r_ohm,x_ohm,p_kw,q_kvar,vmin_pu,vmax_pu,smax_kva
1,,,,,0,0,1.0,1.0,
2,1,2,0.80,0.60,500,250,0.9,1.1,
";

/// Two identical laterals behind a shared feeder segment.
pub const DESK_SYM: &str = "bus,from,to,r_ohm,x_ohm,p_kw,q_kvar,vmin_pu,vmax_pu,smax_kva
1,,,,,0,0,1.0,1.0,
2,1,2,0.40,0.30,100,50,0.9,1.1,
3,2,3,0.60,0.45,300,150,0.9,1.1,
4,2,4,0.60,0.45,300,150,0.9,1.1,
";

pub struct Desk {
    pub network: &'static str,
    pub classes: Vec<(&'static str, &'static str, f64)>,
    pub drps: Vec<DrpConfig>,
    pub rtp: Vec<f64>,
    pub flat: f64,
    pub flex: f64,
    pub pmax_fraction: f64,
    pub mode: ResponseMode,
}

impl Desk {
    pub fn five() -> Self {
        let mut x = DrpConfig::new("X", "X", vec![]);
        x.theta = 0.3;
        let mut y = DrpConfig::new("Y", "Y", vec![]);
        y.theta = 0.3;
        Self {
            network: DESK5,
            classes: vec![("X", "2-3", 0.0), ("Y", "4-5", -0.5)],
            drps: vec![x, y],
            rtp: vec![3.0, 8.0, 14.0],
            flat: 3.0,
            flex: 0.2,
            pmax_fraction: 0.8,
            mode: ResponseMode::Optimal,
        }
    }

    pub fn two() -> Self {
        let mut x = DrpConfig::new("X", "X", vec![]);
        x.theta = 0.3;
        Self {
            network: DESK2,
            classes: vec![("X", "2", 0.0)],
            drps: vec![x],
            rtp: vec![14.0],
            flat: 3.0,
            flex: 0.2,
            pmax_fraction: 1.0,
            mode: ResponseMode::Optimal,
        }
    }

    pub fn symmetric() -> Self {
        let mut x = DrpConfig::new("X", "X", vec![]);
        x.theta = 0.3;
        let mut y = DrpConfig::new("Y", "Y", vec![]);
        y.theta = 0.3;
        Self {
            network: DESK_SYM,
            classes: vec![("X", "3", 0.0), ("Y", "4", 0.0)],
            drps: vec![x, y],
            rtp: vec![12.0],
            flat: 3.0,
            flex: 0.2,
            pmax_fraction: 1.0,
            mode: ResponseMode::Optimal,
        }
    }

    pub fn cases(&self) -> Vec<PeriodCase> {
        let opts = NetworkOptions::default();
        let net = parse_network_str(self.network, "desk", &opts).unwrap();
        let specs: Vec<ClassSpec> = self
            .classes
            .iter()
            .map(|(n, b, _)| ClassSpec {
                name: n.to_string(),
                buses: drpe_core::netmodel::parse_bus_ranges(b).unwrap(),
            })
            .collect();
        let net = Arc::new(assign_classes(&net, &specs).unwrap());
        let forms = Arc::new(NetworkForms::new(&net, FlowMeasure::SendingEnd));
        let mut profile = LoadProfileSet::flat(self.rtp.len());
        profile.flex = FlexDistribution {
            mu: self.flex,
            sigma: 0.05,
            min: self.flex,
            max: self.flex,
        };
        let fr = sample_flexibility(&profile, net.n_buses(), 1).unwrap();
        let loads = build_loads(&net, &profile, &fr).unwrap();
        let kappa: BTreeMap<String, f64> = self.classes.iter().map(|(n, _, k)| (n.to_string(), *k)).collect();
        let tariff = TariffSchedule::new(self.rtp.clone(), Some(self.flat), kappa).unwrap();
        (0..self.rtp.len())
            .map(|t| {
                PeriodCase::build(
                    net.clone(),
                    forms.clone(),
                    loads[t].clone(),
                    &tariff,
                    t,
                    &self.drps,
                    self.pmax_fraction,
                    self.mode,
                    PfOptions::default(),
                )
                .unwrap()
            })
            .collect()
    }
}
