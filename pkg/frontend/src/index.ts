export * from "./state.js";
export * from "./api.js";
export * from "./overlay.js";
export * from "./curves.js";
export * from "./pick.js";
