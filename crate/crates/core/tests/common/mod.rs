pub mod gradient_cases;
