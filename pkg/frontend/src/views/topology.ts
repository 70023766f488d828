import { clear, h, shortId } from "../dom.js";
import type { ConsoleStore } from "../state.js";

/** Live table of stations and resident agents. Agent rows move on
 * MOVE_COMMITTED events; stations grey out when their lease expires. */
export class TopologyView {
  constructor(private root: HTMLElement, private store: ConsoleStore) {
    store.subscribe(() => this.render());
    this.render();
  }

  render(): void {
    clear(this.root);
    const state = this.store.snapshot();
    const status = h("div", { class: "feed-status" }, [
      state.connected ? "event stream: live" : "event stream: reconnecting…",
    ]);
    const stationTable = h("table", { class: "grid", "data-testid": "stations" }, [
      h("tr", {}, [h("th", {}, ["station"]), h("th", {}, ["endpoint"]), h("th", {}, ["agents"])]),
    ]);
    for (const station of this.store.stationRows()) {
      const residents = this.store
        .agentRows()
        .filter((a) => a.position === station.stationId && a.runState === "ACTIVE").length;
      stationTable.append(
        h("tr", { class: station.stale ? "stale" : "", "data-station": station.stationId }, [
          h("td", {}, [station.stationId]),
          h("td", {}, [station.endpoint]),
          h("td", {}, [String(residents)]),
        ]),
      );
    }
    const agentTable = h("table", { class: "grid", "data-testid": "agents" }, [
      h("tr", {}, [
        h("th", {}, ["agent"]),
        h("th", {}, ["behavior"]),
        h("th", {}, ["position"]),
        h("th", {}, ["state"]),
      ]),
    ]);
    for (const agent of this.store.agentRows()) {
      agentTable.append(
        h("tr", { "data-agent": agent.agentId }, [
          h("td", { title: agent.agentId }, [shortId(agent.agentId)]),
          h("td", {}, [agent.behaviorId]),
          h("td", { class: "agent-position" }, [agent.position]),
          h("td", { class: `state-${agent.runState.toLowerCase()}` }, [agent.runState]),
        ]),
      );
    }
    this.root.append(status, h("h3", {}, ["Stations"]), stationTable, h("h3", {}, ["Agents"]), agentTable);
  }
}
